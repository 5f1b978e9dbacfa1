//! Central-difference gradient verification.

use super::{DType, Tensor};
use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub pass: bool,
    pub max_rel_err: f64,
    pub checked: usize,
}

/// Relative disagreement with an absolute floor: when both sides agree to
/// within 1e-9 the coordinate counts as exact. Without the floor, gradients
/// that are identically zero (e.g. through a mean of normalized rows) would
/// be compared against bare central-difference roundoff.
fn rel_err(a: f64, n: f64) -> f64 {
    if (a - n).abs() <= 1e-9 {
        return 0.0;
    }
    (a - n).abs() / (a.abs() + n.abs() + 1e-12)
}

fn numeric_partial<F>(f: &F, base: &[f64], shape: &[usize], i: usize, h: f64) -> Result<f64>
where
    F: Fn(&Tensor) -> Result<Tensor>,
{
    let mut xp = base.to_vec();
    xp[i] += h;
    let fp = f(&Tensor::from_f64(shape, xp)?)?.item();
    let mut xm = base.to_vec();
    xm[i] -= h;
    let fm = f(&Tensor::from_f64(shape, xm)?)?.item();
    Ok((fp - fm) / (2.0 * h))
}

fn check_coords<F>(
    f: &F,
    x: &Tensor,
    h: f64,
    tol: f64,
    coords: &[usize],
) -> Result<GradCheckReport>
where
    F: Fn(&Tensor) -> Result<Tensor>,
{
    if x.dtype() != DType::F64 {
        return Err(Error::InvalidArgument(
            "grad_check requires a 64-bit tensor".into(),
        ));
    }
    let base = x.data_f64();
    let leaf = Tensor::from_f64(x.shape(), base.clone())?.trainable();
    let loss = f(&leaf)?;
    if !loss.shape().is_empty() {
        return Err(Error::NonScalarLoss {
            shape: loss.shape().to_vec(),
        });
    }
    if !loss.item().is_finite() {
        return Err(Error::NonFinite { op: "grad_check" });
    }
    loss.backward()?;
    let analytic = leaf
        .grad_f64()
        .ok_or_else(|| Error::InvalidArgument("grad_check: no gradient reached x".into()))?;

    let mut max_err = 0.0f64;
    for &i in coords {
        let numeric = numeric_partial(f, &base, x.shape(), i, h)?;
        let e = rel_err(analytic[i], numeric);
        if e > max_err {
            max_err = e;
        }
    }
    Ok(GradCheckReport {
        pass: max_err <= tol,
        max_rel_err: max_err,
        checked: coords.len(),
    })
}

/// Compare the tape gradient of scalar `f` at `x` against central
/// differences over every coordinate.
pub fn grad_check<F>(f: F, x: &Tensor, h: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&Tensor) -> Result<Tensor>,
{
    let coords: Vec<usize> = (0..x.numel()).collect();
    check_coords(&f, x, h, tol, &coords)
}

/// Same check over a random subset of coordinates; for large parameter
/// tensors where the full sweep would be wasteful.
pub fn grad_check_sampled<F>(
    f: F,
    x: &Tensor,
    h: f64,
    tol: f64,
    num_coords: usize,
    rng: &mut Rng,
) -> Result<GradCheckReport>
where
    F: Fn(&Tensor) -> Result<Tensor>,
{
    let n = x.numel();
    let coords: Vec<usize> = if num_coords >= n {
        (0..n).collect()
    } else {
        let mut all: Vec<usize> = (0..n).collect();
        rng.shuffle(&mut all);
        all.truncate(num_coords);
        all
    };
    check_coords(&f, x, h, tol, &coords)
}

/// Check an explicitly supplied gradient against central differences.
/// Lets tests verify that a wrong gradient is in fact detected.
pub fn grad_check_against<F>(
    f: F,
    analytic: &[f64],
    x: &Tensor,
    h: f64,
    tol: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&Tensor) -> Result<Tensor>,
{
    if x.dtype() != DType::F64 {
        return Err(Error::InvalidArgument(
            "grad_check requires a 64-bit tensor".into(),
        ));
    }
    let base = x.data_f64();
    let mut max_err = 0.0f64;
    for i in 0..x.numel() {
        let numeric = numeric_partial(&f, &base, x.shape(), i, h)?;
        let e = rel_err(analytic[i], numeric);
        if e > max_err {
            max_err = e;
        }
    }
    Ok(GradCheckReport {
        pass: max_err <= tol,
        max_rel_err: max_err,
        checked: x.numel(),
    })
}
