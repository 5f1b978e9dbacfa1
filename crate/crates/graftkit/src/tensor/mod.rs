//! Dense row-major tensors with reverse-mode automatic differentiation.
//!
//! The primitive set is deliberately small: exactly what the token mixers,
//! the model graph, and the losses need. Every primitive validates shapes,
//! rejects non-finite outputs, and records itself on the implicit tape when
//! any input is tracked. Buffers are shared via `Arc`, so reshapes, slices
//! of parameters into leaves, and graph edits are cheap.
//!
//! Tensors are not `Send`: a tape lives and dies on one thread. Parameter
//! buffers (`Arc<Buf>`) are `Send + Sync` and can be lifted into per-thread
//! leaves, which is how data-parallel training shards work.

mod backward;
mod gradcheck;
mod kernels;
mod ops;
mod scalar;

pub use backward::Tape;
pub use gradcheck::{grad_check, grad_check_against, grad_check_sampled, GradCheckReport};
pub use ops::{concat_last_dim, primitive_forward, ConvAxis, PrimitiveAttrs, PrimitiveId, ALL_PRIMITIVES};
pub use scalar::Scalar;

use crate::error::{Error, Result};
use crate::rng::Rng;
use serde::{Deserialize, Serialize};
use std::cell::RefCell;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

/// Element type of a tensor buffer. F32 is the working precision; F64 is
/// the verification mode used by gradient checks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn size_bytes(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }

    pub fn code(self) -> u8 {
        match self {
            DType::F32 => 1,
            DType::F64 => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<DType> {
        match code {
            1 => Some(DType::F32),
            2 => Some(DType::F64),
            _ => None,
        }
    }
}

/// Flat scalar storage.
#[derive(Debug, Clone, PartialEq)]
pub enum Buf {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

impl Buf {
    pub fn zeros(dtype: DType, n: usize) -> Buf {
        match dtype {
            DType::F32 => Buf::F32(vec![0.0; n]),
            DType::F64 => Buf::F64(vec![0.0; n]),
        }
    }

    pub fn from_f64_slice(dtype: DType, xs: &[f64]) -> Buf {
        match dtype {
            DType::F32 => Buf::F32(xs.iter().map(|&x| x as f32).collect()),
            DType::F64 => Buf::F64(xs.to_vec()),
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Buf::F32(v) => v.len(),
            Buf::F64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dtype(&self) -> DType {
        match self {
            Buf::F32(_) => DType::F32,
            Buf::F64(_) => DType::F64,
        }
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        match self {
            Buf::F32(v) => v.iter().map(|&x| x as f64).collect(),
            Buf::F64(v) => v.clone(),
        }
    }

    pub fn get(&self, i: usize) -> f64 {
        match self {
            Buf::F32(v) => v[i] as f64,
            Buf::F64(v) => v[i],
        }
    }

    pub fn set(&mut self, i: usize, x: f64) {
        match self {
            Buf::F32(v) => v[i] = x as f32,
            Buf::F64(v) => v[i] = x,
        }
    }

    pub fn all_finite(&self) -> bool {
        // Branch-free exponent scan; the early-exit form defeats the
        // vectorizer and this runs after every primitive.
        match self {
            Buf::F32(v) => {
                let mut bad = 0u32;
                for x in v {
                    bad |= u32::from((x.to_bits() & 0x7f80_0000) == 0x7f80_0000);
                }
                bad == 0
            }
            Buf::F64(v) => {
                let mut bad = 0u64;
                for x in v {
                    bad |= u64::from((x.to_bits() & 0x7ff0_0000_0000_0000) == 0x7ff0_0000_0000_0000);
                }
                bad == 0
            }
        }
    }

    pub fn as_f32(&self) -> &[f32] {
        match self {
            Buf::F32(v) => v,
            Buf::F64(_) => panic!("buffer is f64, expected f32"),
        }
    }

    pub fn as_f64(&self) -> &[f64] {
        match self {
            Buf::F64(v) => v,
            Buf::F32(_) => panic!("buffer is f32, expected f64"),
        }
    }

    /// Elementwise `self += other`, allocating nothing.
    pub fn add_assign(&mut self, other: &Buf) {
        match (self, other) {
            (Buf::F32(a), Buf::F32(b)) => {
                for (x, y) in a.iter_mut().zip(b) {
                    *x += y;
                }
            }
            (Buf::F64(a), Buf::F64(b)) => {
                for (x, y) in a.iter_mut().zip(b) {
                    *x += y;
                }
            }
            _ => panic!("dtype mismatch in grad accumulation"),
        }
    }

    pub fn cast(&self, dtype: DType) -> Buf {
        if self.dtype() == dtype {
            return self.clone();
        }
        Buf::from_f64_slice(dtype, &self.to_f64_vec())
    }
}

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

fn fresh_id() -> u64 {
    NEXT_ID.fetch_add(1, Ordering::Relaxed)
}

pub(crate) struct Inner {
    pub(crate) id: u64,
    pub(crate) shape: Vec<usize>,
    pub(crate) buf: Arc<Buf>,
    pub(crate) requires_grad: bool,
    pub(crate) grad: RefCell<Option<Buf>>,
    pub(crate) op: Option<ops::Op>,
}

/// Dense row-major tensor. Cloning is cheap (reference to shared state).
#[derive(Clone)]
pub struct Tensor(pub(crate) Rc<Inner>);

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.0.shape)
            .field("dtype", &self.dtype())
            .field("requires_grad", &self.0.requires_grad)
            .field("tracked", &self.0.op.is_some())
            .finish()
    }
}

fn check_numel(shape: &[usize], len: usize) -> Result<()> {
    let numel: usize = shape.iter().product();
    if numel != len {
        return Err(Error::InvalidShape {
            op: "new",
            shape: shape.to_vec(),
            reason: format!("shape implies {numel} elements, buffer has {len}"),
        });
    }
    Ok(())
}

impl Tensor {
    pub(crate) fn from_parts(
        shape: Vec<usize>,
        buf: Arc<Buf>,
        requires_grad: bool,
        op: Option<ops::Op>,
    ) -> Tensor {
        debug_assert_eq!(shape.iter().product::<usize>(), buf.len());
        Tensor(Rc::new(Inner {
            id: fresh_id(),
            shape,
            buf,
            requires_grad,
            grad: RefCell::new(None),
            op,
        }))
    }

    pub fn from_buf(shape: &[usize], buf: Buf) -> Result<Tensor> {
        check_numel(shape, buf.len())?;
        Ok(Tensor::from_parts(shape.to_vec(), Arc::new(buf), false, None))
    }

    /// Leaf sharing an existing buffer, e.g. a parameter bound for a forward
    /// pass. No copy is made.
    pub fn leaf(shape: &[usize], buf: Arc<Buf>, requires_grad: bool) -> Result<Tensor> {
        check_numel(shape, buf.len())?;
        Ok(Tensor::from_parts(shape.to_vec(), buf, requires_grad, None))
    }

    pub fn from_f32(shape: &[usize], data: Vec<f32>) -> Result<Tensor> {
        check_numel(shape, data.len())?;
        Ok(Tensor::from_parts(
            shape.to_vec(),
            Arc::new(Buf::F32(data)),
            false,
            None,
        ))
    }

    pub fn from_f64(shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        check_numel(shape, data.len())?;
        Ok(Tensor::from_parts(
            shape.to_vec(),
            Arc::new(Buf::F64(data)),
            false,
            None,
        ))
    }

    pub fn from_f64_as(shape: &[usize], data: &[f64], dtype: DType) -> Result<Tensor> {
        check_numel(shape, data.len())?;
        Ok(Tensor::from_parts(
            shape.to_vec(),
            Arc::new(Buf::from_f64_slice(dtype, data)),
            false,
            None,
        ))
    }

    pub fn zeros(shape: &[usize], dtype: DType) -> Tensor {
        let n = shape.iter().product();
        Tensor::from_parts(shape.to_vec(), Arc::new(Buf::zeros(dtype, n)), false, None)
    }

    pub fn full(shape: &[usize], value: f64, dtype: DType) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor::from_parts(
            shape.to_vec(),
            Arc::new(Buf::from_f64_slice(dtype, &vec![value; n])),
            false,
            None,
        )
    }

    pub fn scalar(value: f64, dtype: DType) -> Tensor {
        Tensor::from_parts(
            Vec::new(),
            Arc::new(Buf::from_f64_slice(dtype, &[value])),
            false,
            None,
        )
    }

    pub fn randn(shape: &[usize], std: f64, rng: &mut Rng, dtype: DType) -> Tensor {
        let n: usize = shape.iter().product();
        let data = rng.normal_vec(n, std);
        Tensor::from_parts(
            shape.to_vec(),
            Arc::new(Buf::from_f64_slice(dtype, &data)),
            false,
            None,
        )
    }

    /// Mark a leaf as trainable. Tracked interior nodes keep their history.
    pub fn trainable(self) -> Tensor {
        if self.0.op.is_some() {
            return self;
        }
        Tensor(Rc::new(Inner {
            id: self.0.id,
            shape: self.0.shape.clone(),
            buf: Arc::clone(&self.0.buf),
            requires_grad: true,
            grad: RefCell::new(None),
            op: None,
        }))
    }

    /// A leaf with the same buffer and no history.
    pub fn detach(&self) -> Tensor {
        Tensor::from_parts(self.0.shape.clone(), Arc::clone(&self.0.buf), false, None)
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn numel(&self) -> usize {
        self.0.buf.len()
    }

    pub fn dtype(&self) -> DType {
        self.0.buf.dtype()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    /// True when this tensor participates in gradient flow.
    pub(crate) fn tracked(&self) -> bool {
        self.0.requires_grad || self.0.op.is_some()
    }

    pub fn buf(&self) -> &Arc<Buf> {
        &self.0.buf
    }

    pub fn data_f64(&self) -> Vec<f64> {
        self.0.buf.to_f64_vec()
    }

    /// Value of a scalar tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.numel(), 1, "item() requires a single-element tensor");
        self.0.buf.get(0)
    }

    pub fn grad(&self) -> Option<Buf> {
        self.0.grad.borrow().clone()
    }

    pub fn grad_f64(&self) -> Option<Vec<f64>> {
        self.0.grad.borrow().as_ref().map(|g| g.to_f64_vec())
    }

    pub fn zero_grad(&self) {
        *self.0.grad.borrow_mut() = None;
    }

    pub fn to_dtype(&self, dtype: DType) -> Tensor {
        if self.dtype() == dtype {
            return self.detach();
        }
        Tensor::from_parts(
            self.0.shape.clone(),
            Arc::new(self.0.buf.cast(dtype)),
            false,
            None,
        )
    }

    pub(crate) fn accumulate_grad(&self, contrib: Buf) {
        let mut slot = self.0.grad.borrow_mut();
        match slot.as_mut() {
            Some(g) => g.add_assign(&contrib),
            None => *slot = Some(contrib),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn numel_matches_shape_product() {
        let t = Tensor::zeros(&[2, 3, 4], DType::F32);
        assert_eq!(t.numel(), 24);
        let s = Tensor::scalar(1.5, DType::F64);
        assert_eq!(s.numel(), 1);
        assert_eq!(s.shape(), &[] as &[usize]);
        assert_eq!(s.item(), 1.5);
    }

    #[test]
    fn shape_buffer_disagreement_rejected() {
        let err = Tensor::from_f32(&[2, 2], vec![1.0; 3]);
        assert!(err.is_err());
    }

    #[test]
    fn leaf_shares_buffer() {
        let buf = Arc::new(Buf::F32(vec![1.0, 2.0]));
        let t = Tensor::leaf(&[2], Arc::clone(&buf), true).unwrap();
        assert!(Arc::ptr_eq(t.buf(), &buf));
        assert!(t.requires_grad());
    }

    #[test]
    fn dtype_codes_roundtrip() {
        for d in [DType::F32, DType::F64] {
            assert_eq!(DType::from_code(d.code()), Some(d));
        }
        assert_eq!(DType::from_code(0), None);
    }
}
