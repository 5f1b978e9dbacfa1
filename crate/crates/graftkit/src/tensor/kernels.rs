//! Raw numeric loops, generic over the element type.
//!
//! Hot paths (matmul, conv, softmax, layernorm) are written as contiguous
//! row sweeps so the autovectorizer can do its job. Reduction order inside
//! every kernel is fixed, which keeps results bit-reproducible.

use super::scalar::Scalar;

/// out[m,n] = a[m,k] @ b[k,n]
pub fn matmul<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::ZERO; m * n];
    matmul_into(&mut out, a, b, m, k, n);
    out
}

/// Four output rows per sweep: each loaded b-row feeds four independent
/// accumulation chains, which is what keeps the FMA ports busy.
pub fn matmul_into<T: Scalar>(out: &mut [T], a: &[T], b: &[T], m: usize, k: usize, n: usize) {
    let m4 = m - m % 4;
    let mut i = 0;
    while i < m4 {
        let (o01, o23) = out[i * n..(i + 4) * n].split_at_mut(2 * n);
        let (o0, o1) = o01.split_at_mut(n);
        let (o2, o3) = o23.split_at_mut(n);
        let a0 = &a[i * k..(i + 1) * k];
        let a1 = &a[(i + 1) * k..(i + 2) * k];
        let a2 = &a[(i + 2) * k..(i + 3) * k];
        let a3 = &a[(i + 3) * k..(i + 4) * k];
        for p in 0..k {
            let b_row = &b[p * n..(p + 1) * n];
            let (c0, c1, c2, c3) = (a0[p], a1[p], a2[p], a3[p]);
            for j in 0..n {
                let bv = b_row[j];
                o0[j] += c0 * bv;
                o1[j] += c1 * bv;
                o2[j] += c2 * bv;
                o3[j] += c3 * bv;
            }
        }
        i += 4;
    }
    while i < m {
        let o_row = &mut out[i * n..(i + 1) * n];
        let a_row = &a[i * k..(i + 1) * k];
        for (p, &a_ip) in a_row.iter().enumerate() {
            let b_row = &b[p * n..(p + 1) * n];
            for j in 0..n {
                o_row[j] += a_ip * b_row[j];
            }
        }
        i += 1;
    }
}

/// out[m,n] = a[m,k] @ b[n,k]^T
///
/// Goes through an explicit transpose of `b` so the accumulation stays in
/// axpy form; a dot-product inner loop would serialize on the reduction.
pub fn matmul_nt<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut bt = vec![T::ZERO; k * n];
    for j in 0..n {
        for p in 0..k {
            bt[p * n + j] = b[j * k + p];
        }
    }
    matmul(a, &bt, m, k, n)
}

/// out[m,n] = a[k,m]^T @ b[k,n]
pub fn matmul_tn<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::ZERO; m * n];
    for p in 0..k {
        let a_row = &a[p * m..(p + 1) * m];
        let b_row = &b[p * n..(p + 1) * n];
        for (i, &a_pi) in a_row.iter().enumerate() {
            let o_row = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                o_row[j] += a_pi * b_row[j];
            }
        }
    }
    out
}

/// Batched matmul over identical leading dims.
pub fn batched_matmul<T: Scalar>(
    a: &[T],
    b: &[T],
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
) -> Vec<T> {
    let mut out = vec![T::ZERO; batch * m * n];
    for bi in 0..batch {
        matmul_into(
            &mut out[bi * m * n..(bi + 1) * m * n],
            &a[bi * m * k..(bi + 1) * m * k],
            &b[bi * k * n..(bi + 1) * k * n],
            m,
            k,
            n,
        );
    }
    out
}

/// Depthwise causal conv along the sequence axis of x[b, s, c]:
/// y[b,s,c] = bias[c] + sum_j filt[c,j] * x[b,s-j,c]
pub fn conv1d_seq<T: Scalar>(
    x: &[T],
    filt: &[T],
    bias: &[T],
    b: usize,
    n: usize,
    c: usize,
    k: usize,
) -> Vec<T> {
    // Transposed filter [k, c] so the channel sweep is contiguous.
    let mut ft = vec![T::ZERO; k * c];
    for ch in 0..c {
        for j in 0..k {
            ft[j * c + ch] = filt[ch * k + j];
        }
    }
    let mut out = vec![T::ZERO; b * n * c];
    for bi in 0..b {
        for s in 0..n {
            let o_row = &mut out[(bi * n + s) * c..(bi * n + s + 1) * c];
            o_row.copy_from_slice(bias);
            let jmax = k.min(s + 1);
            for j in 0..jmax {
                let x_row = &x[(bi * n + s - j) * c..(bi * n + s - j + 1) * c];
                let f_row = &ft[j * c..(j + 1) * c];
                for ch in 0..c {
                    o_row[ch] += f_row[ch] * x_row[ch];
                }
            }
        }
    }
    out
}

/// Backward of `conv1d_seq`. Returns (dx, dfilt, dbias).
pub fn conv1d_seq_backward<T: Scalar>(
    g: &[T],
    x: &[T],
    filt: &[T],
    b: usize,
    n: usize,
    c: usize,
    k: usize,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let mut dx = vec![T::ZERO; b * n * c];
    let mut df = vec![T::ZERO; c * k];
    let mut dbias = vec![T::ZERO; c];
    for bi in 0..b {
        for s in 0..n {
            let g_row = &g[(bi * n + s) * c..(bi * n + s + 1) * c];
            for ch in 0..c {
                dbias[ch] += g_row[ch];
            }
            let jmax = k.min(s + 1);
            for j in 0..jmax {
                let src = (bi * n + s - j) * c;
                for ch in 0..c {
                    dx[src + ch] += filt[ch * k + j] * g_row[ch];
                    df[ch * k + j] += g_row[ch] * x[src + ch];
                }
            }
        }
    }
    (dx, df, dbias)
}

/// Depthwise causal conv along the channel axis of x[b, s, c], with the
/// filter indexed by channel position:
/// y[b,s,c] = bias[c] + sum_j filt[c,j] * x[b,s,c-j]
pub fn conv1d_chan<T: Scalar>(
    x: &[T],
    filt: &[T],
    bias: &[T],
    rows: usize,
    c: usize,
    k: usize,
) -> Vec<T> {
    let mut out = vec![T::ZERO; rows * c];
    for r in 0..rows {
        let x_row = &x[r * c..(r + 1) * c];
        let o_row = &mut out[r * c..(r + 1) * c];
        for ch in 0..c {
            let mut acc = bias[ch];
            let jmax = k.min(ch + 1);
            for j in 0..jmax {
                acc += filt[ch * k + j] * x_row[ch - j];
            }
            o_row[ch] = acc;
        }
    }
    out
}

/// Backward of `conv1d_chan`. Returns (dx, dfilt, dbias).
pub fn conv1d_chan_backward<T: Scalar>(
    g: &[T],
    x: &[T],
    filt: &[T],
    rows: usize,
    c: usize,
    k: usize,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let mut dx = vec![T::ZERO; rows * c];
    let mut df = vec![T::ZERO; c * k];
    let mut dbias = vec![T::ZERO; c];
    for r in 0..rows {
        let g_row = &g[r * c..(r + 1) * c];
        let x_row = &x[r * c..(r + 1) * c];
        for ch in 0..c {
            dbias[ch] += g_row[ch];
            let jmax = k.min(ch + 1);
            for j in 0..jmax {
                dx[r * c + ch - j] += filt[ch * k + j] * g_row[ch];
                df[ch * k + j] += g_row[ch] * x_row[ch - j];
            }
        }
    }
    (dx, df, dbias)
}

/// Softmax over the last axis, max-subtracted.
pub fn softmax_rows<T: Scalar>(x: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::ZERO; rows * cols];
    for r in 0..rows {
        let x_row = &x[r * cols..(r + 1) * cols];
        let o_row = &mut out[r * cols..(r + 1) * cols];
        let mut mx = x_row[0];
        for &v in &x_row[1..] {
            if v > mx {
                mx = v;
            }
        }
        let mut sum = T::ZERO;
        for (o, &v) in o_row.iter_mut().zip(x_row) {
            let e = (v - mx).exp();
            *o = e;
            sum += e;
        }
        let inv = T::ONE / sum;
        for o in o_row.iter_mut() {
            *o = *o * inv;
        }
    }
    out
}

/// dx = y * (g - rowsum(g * y))
pub fn softmax_rows_backward<T: Scalar>(g: &[T], y: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut dx = vec![T::ZERO; rows * cols];
    for r in 0..rows {
        let g_row = &g[r * cols..(r + 1) * cols];
        let y_row = &y[r * cols..(r + 1) * cols];
        let mut dot = T::ZERO;
        for (gv, yv) in g_row.iter().zip(y_row) {
            dot += *gv * *yv;
        }
        let d_row = &mut dx[r * cols..(r + 1) * cols];
        for ((d, gv), yv) in d_row.iter_mut().zip(g_row).zip(y_row) {
            *d = *yv * (*gv - dot);
        }
    }
    dx
}

/// Normalization over the last axis, no affine part. Returns (y, inv_std).
pub fn layernorm_rows<T: Scalar>(x: &[T], rows: usize, cols: usize, eps: f64) -> (Vec<T>, Vec<T>) {
    let eps = T::from_f64(eps);
    let inv_n = T::ONE / T::from_f64(cols as f64);
    let mut out = vec![T::ZERO; rows * cols];
    let mut inv_stds = vec![T::ZERO; rows];
    for r in 0..rows {
        let x_row = &x[r * cols..(r + 1) * cols];
        let mut mean = T::ZERO;
        for &v in x_row {
            mean += v;
        }
        mean = mean * inv_n;
        let mut var = T::ZERO;
        for &v in x_row {
            let d = v - mean;
            var += d * d;
        }
        var = var * inv_n;
        let inv_std = T::ONE / (var + eps).sqrt();
        inv_stds[r] = inv_std;
        let o_row = &mut out[r * cols..(r + 1) * cols];
        for (o, &v) in o_row.iter_mut().zip(x_row) {
            *o = (v - mean) * inv_std;
        }
    }
    (out, inv_stds)
}

/// dx = inv_std * (g - mean(g) - y * mean(g * y)) per row.
pub fn layernorm_rows_backward<T: Scalar>(
    g: &[T],
    y: &[T],
    inv_stds: &[T],
    rows: usize,
    cols: usize,
) -> Vec<T> {
    let inv_n = T::ONE / T::from_f64(cols as f64);
    let mut dx = vec![T::ZERO; rows * cols];
    for r in 0..rows {
        let g_row = &g[r * cols..(r + 1) * cols];
        let y_row = &y[r * cols..(r + 1) * cols];
        let mut mg = T::ZERO;
        let mut mgy = T::ZERO;
        for (gv, yv) in g_row.iter().zip(y_row) {
            mg += *gv;
            mgy += *gv * *yv;
        }
        mg = mg * inv_n;
        mgy = mgy * inv_n;
        let inv_std = inv_stds[r];
        let d_row = &mut dx[r * cols..(r + 1) * cols];
        for ((d, gv), yv) in d_row.iter_mut().zip(g_row).zip(y_row) {
            *d = inv_std * (*gv - mg - *yv * mgy);
        }
    }
    dx
}

const FRAC_1_SQRT_2: f64 = std::f64::consts::FRAC_1_SQRT_2;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Exact-erf GELU.
pub fn gelu<T: Scalar>(x: &[T]) -> Vec<T> {
    let half = T::from_f64(0.5);
    let c = T::from_f64(FRAC_1_SQRT_2);
    x.iter()
        .map(|&v| half * v * (T::ONE + (v * c).erf()))
        .collect()
}

pub fn gelu_backward<T: Scalar>(g: &[T], x: &[T]) -> Vec<T> {
    let half = T::from_f64(0.5);
    let c = T::from_f64(FRAC_1_SQRT_2);
    let pdf_c = T::from_f64(INV_SQRT_2PI);
    g.iter()
        .zip(x)
        .map(|(&gv, &v)| {
            let cdf = half * (T::ONE + (v * c).erf());
            let pdf = pdf_c * (-half * v * v).exp();
            gv * (cdf + v * pdf)
        })
        .collect()
}

pub fn silu<T: Scalar>(x: &[T]) -> Vec<T> {
    x.iter()
        .map(|&v| {
            let s = T::ONE / (T::ONE + (-v).exp());
            v * s
        })
        .collect()
}

pub fn silu_backward<T: Scalar>(g: &[T], x: &[T]) -> Vec<T> {
    g.iter()
        .zip(x)
        .map(|(&gv, &v)| {
            let s = T::ONE / (T::ONE + (-v).exp());
            gv * s * (T::ONE + v * (T::ONE - s))
        })
        .collect()
}

/// Right-aligned broadcast strides for `shape` against `out_shape`.
/// Missing or size-1 axes get stride 0.
pub fn broadcast_strides(shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let rank = out_shape.len();
    let offset = rank - shape.len();
    let mut strides = vec![0usize; rank];
    let mut acc = 1usize;
    for ax in (0..shape.len()).rev() {
        let s = if shape[ax] == 1 { 0 } else { acc };
        strides[offset + ax] = s;
        acc *= shape[ax];
    }
    strides
}

/// Elementwise binary op with numpy-style right-aligned broadcasting.
pub fn broadcast_zip<T: Scalar, F: Fn(T, T) -> T>(
    a: &[T],
    a_shape: &[usize],
    b: &[T],
    b_shape: &[usize],
    out_shape: &[usize],
    f: F,
) -> Vec<T> {
    let numel: usize = out_shape.iter().product();
    // Fast path: identical shapes.
    if a_shape == out_shape && b_shape == out_shape {
        return a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect();
    }
    let sa = broadcast_strides(a_shape, out_shape);
    let sb = broadcast_strides(b_shape, out_shape);
    let rank = out_shape.len();
    let mut idx = vec![0usize; rank];
    let mut off_a = 0usize;
    let mut off_b = 0usize;
    let mut out = Vec::with_capacity(numel);
    for _ in 0..numel {
        out.push(f(a[off_a], b[off_b]));
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            off_a += sa[ax];
            off_b += sb[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            idx[ax] = 0;
            off_a -= sa[ax] * out_shape[ax];
            off_b -= sb[ax] * out_shape[ax];
        }
    }
    out
}

/// Sum `g` (shaped `from_shape`) down to `to_shape` by reducing broadcast
/// axes. Inverse of broadcasting in the backward pass.
pub fn reduce_to_shape<T: Scalar>(g: &[T], from_shape: &[usize], to_shape: &[usize]) -> Vec<T> {
    if from_shape == to_shape {
        return g.to_vec();
    }
    let to_numel: usize = to_shape.iter().product();
    let strides = broadcast_strides(to_shape, from_shape);
    let rank = from_shape.len();
    let mut out = vec![T::ZERO; to_numel];
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for &gv in g {
        out[off] += gv;
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            off += strides[ax];
            if idx[ax] < from_shape[ax] {
                break;
            }
            idx[ax] = 0;
            off -= strides[ax] * from_shape[ax];
        }
    }
    out
}

/// General axis permutation: out has dims `in_dims` permuted by `perm`.
pub fn permute<T: Scalar>(x: &[T], in_dims: &[usize], perm: &[usize]) -> Vec<T> {
    let rank = in_dims.len();
    let out_dims: Vec<usize> = perm.iter().map(|&p| in_dims[p]).collect();
    let mut in_strides = vec![1usize; rank];
    for ax in (0..rank.saturating_sub(1)).rev() {
        in_strides[ax] = in_strides[ax + 1] * in_dims[ax + 1];
    }
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let numel: usize = in_dims.iter().product();
    let mut out = Vec::with_capacity(numel);
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for _ in 0..numel {
        out.push(x[off]);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            off += src_strides[ax];
            if idx[ax] < out_dims[ax] {
                break;
            }
            idx[ax] = 0;
            off -= src_strides[ax] * out_dims[ax];
        }
    }
    out
}
