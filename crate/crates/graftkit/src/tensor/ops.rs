//! Primitive forward operations and tape recording.

use super::kernels;
use super::{Buf, Tensor};
use crate::error::{Error, Result};
use std::sync::Arc;

/// Axis a depthwise causal convolution runs along for `[B, N, C]` input.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConvAxis {
    /// Convolve along N, one filter per channel c.
    Sequence,
    /// Convolve along C within each token, one filter per channel position.
    Channel,
}

/// Recorded application of a primitive: parents plus saved context.
pub(crate) enum Op {
    Matmul {
        a: Tensor,
        b: Tensor,
    },
    BatchedMatmul {
        a: Tensor,
        b: Tensor,
    },
    Conv1d {
        x: Tensor,
        filt: Tensor,
        bias: Tensor,
        axis: ConvAxis,
    },
    RowSoftmax {
        x: Tensor,
        y: Arc<Buf>,
    },
    LayerNorm {
        x: Tensor,
        y: Arc<Buf>,
        inv_std: Buf,
    },
    Gelu {
        x: Tensor,
    },
    Silu {
        x: Tensor,
    },
    Add {
        a: Tensor,
        b: Tensor,
    },
    Mul {
        a: Tensor,
        b: Tensor,
    },
    Scale {
        x: Tensor,
        s: f64,
    },
    Sum {
        x: Tensor,
    },
    Mean {
        x: Tensor,
    },
    Reshape {
        x: Tensor,
    },
    Permute {
        x: Tensor,
        perm: Vec<usize>,
    },
    ConcatLastDim {
        parts: Vec<Tensor>,
    },
    Slice {
        x: Tensor,
        axis: usize,
        start: usize,
    },
    EmbeddingLookup {
        table: Tensor,
        ids: Arc<Vec<usize>>,
    },
    Abs {
        x: Tensor,
    },
    Huber {
        x: Tensor,
        delta: f64,
    },
}

impl Op {
    pub(crate) fn parents(&self) -> Vec<&Tensor> {
        match self {
            Op::Matmul { a, b } | Op::BatchedMatmul { a, b } | Op::Add { a, b } | Op::Mul { a, b } => {
                vec![a, b]
            }
            Op::Conv1d { x, filt, bias, .. } => vec![x, filt, bias],
            Op::RowSoftmax { x, .. }
            | Op::LayerNorm { x, .. }
            | Op::Gelu { x }
            | Op::Silu { x }
            | Op::Scale { x, .. }
            | Op::Sum { x }
            | Op::Mean { x }
            | Op::Reshape { x }
            | Op::Permute { x, .. }
            | Op::Slice { x, .. }
            | Op::Abs { x }
            | Op::Huber { x, .. } => vec![x],
            Op::ConcatLastDim { parts } => parts.iter().collect(),
            Op::EmbeddingLookup { table, .. } => vec![table],
        }
    }
}

fn same_dtype(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.dtype() != b.dtype() {
        return Err(Error::DTypeMismatch {
            op,
            lhs: a.dtype(),
            rhs: b.dtype(),
        });
    }
    Ok(())
}

fn finish(
    op_name: &'static str,
    shape: Vec<usize>,
    buf: Buf,
    tracked: bool,
    make_op: impl FnOnce() -> Op,
) -> Result<Tensor> {
    if !buf.all_finite() {
        return Err(Error::NonFinite { op: op_name });
    }
    let op = if tracked { Some(make_op()) } else { None };
    Ok(Tensor::from_parts(shape, Arc::new(buf), false, op))
}

fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0usize; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let db = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        if da == db || da == 1 || db == 1 {
            out[i] = da.max(db);
        } else {
            return Err(Error::ShapeMismatch {
                op,
                lhs: a.to_vec(),
                rhs: b.to_vec(),
            });
        }
    }
    Ok(out)
}

macro_rules! zip_bufs {
    ($op:expr, $a:expr, $b:expr, $f32k:expr, $f64k:expr) => {
        match ($a, $b) {
            (Buf::F32(x), Buf::F32(y)) => Buf::F32($f32k(x, y)),
            (Buf::F64(x), Buf::F64(y)) => Buf::F64($f64k(x, y)),
            _ => unreachable!("dtype checked by caller"),
        }
    };
}

impl Tensor {
    /// Strict 2-D matrix product.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        same_dtype("matmul", self, other)?;
        let (sa, sb) = (self.shape(), other.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let buf = zip_bufs!(
            "matmul",
            self.buf().as_ref(),
            other.buf().as_ref(),
            |x, y| kernels::matmul(x, y, m, k, n),
            |x, y| kernels::matmul(x, y, m, k, n)
        );
        let tracked = self.tracked() || other.tracked();
        finish("matmul", vec![m, n], buf, tracked, || Op::Matmul {
            a: self.clone(),
            b: other.clone(),
        })
    }

    /// Matmul over matching leading batch dims: `[.., m, k] x [.., k, n]`.
    pub fn bmm(&self, other: &Tensor) -> Result<Tensor> {
        same_dtype("batched-matmul", self, other)?;
        let (sa, sb) = (self.shape(), other.shape());
        let ok = sa.len() >= 2
            && sa.len() == sb.len()
            && sa[..sa.len() - 2] == sb[..sb.len() - 2]
            && sa[sa.len() - 1] == sb[sb.len() - 2];
        if !ok {
            return Err(Error::ShapeMismatch {
                op: "batched-matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let batch: usize = sa[..sa.len() - 2].iter().product();
        let (m, k, n) = (sa[sa.len() - 2], sa[sa.len() - 1], sb[sb.len() - 1]);
        let buf = zip_bufs!(
            "batched-matmul",
            self.buf().as_ref(),
            other.buf().as_ref(),
            |x, y| kernels::batched_matmul(x, y, batch, m, k, n),
            |x, y| kernels::batched_matmul(x, y, batch, m, k, n)
        );
        let mut shape = sa[..sa.len() - 2].to_vec();
        shape.push(m);
        shape.push(n);
        let tracked = self.tracked() || other.tracked();
        finish("batched-matmul", shape, buf, tracked, || Op::BatchedMatmul {
            a: self.clone(),
            b: other.clone(),
        })
    }

    /// Depthwise causal 1-D convolution with per-channel bias over
    /// `[B, N, C]` input. `filt` is `[C, K]`, `bias` is `[C]`.
    pub fn conv1d_depthwise_causal(
        &self,
        filt: &Tensor,
        bias: &Tensor,
        axis: ConvAxis,
    ) -> Result<Tensor> {
        same_dtype("depthwise-causal-conv1d", self, filt)?;
        same_dtype("depthwise-causal-conv1d", self, bias)?;
        let s = self.shape();
        if s.len() != 3 || filt.shape().len() != 2 || bias.shape().len() != 1 {
            return Err(Error::ShapeMismatch {
                op: "depthwise-causal-conv1d",
                lhs: s.to_vec(),
                rhs: filt.shape().to_vec(),
            });
        }
        let (b, n, c) = (s[0], s[1], s[2]);
        let k = filt.shape()[1];
        let chan = match axis {
            ConvAxis::Sequence => c,
            ConvAxis::Channel => c,
        };
        if filt.shape()[0] != chan || bias.shape()[0] != chan || k == 0 {
            return Err(Error::ShapeMismatch {
                op: "depthwise-causal-conv1d",
                lhs: s.to_vec(),
                rhs: filt.shape().to_vec(),
            });
        }
        let buf = match (self.buf().as_ref(), filt.buf().as_ref(), bias.buf().as_ref()) {
            (Buf::F32(x), Buf::F32(f), Buf::F32(bb)) => Buf::F32(match axis {
                ConvAxis::Sequence => kernels::conv1d_seq(x, f, bb, b, n, c, k),
                ConvAxis::Channel => kernels::conv1d_chan(x, f, bb, b * n, c, k),
            }),
            (Buf::F64(x), Buf::F64(f), Buf::F64(bb)) => Buf::F64(match axis {
                ConvAxis::Sequence => kernels::conv1d_seq(x, f, bb, b, n, c, k),
                ConvAxis::Channel => kernels::conv1d_chan(x, f, bb, b * n, c, k),
            }),
            _ => unreachable!("dtype checked above"),
        };
        let tracked = self.tracked() || filt.tracked() || bias.tracked();
        finish("depthwise-causal-conv1d", s.to_vec(), buf, tracked, || Op::Conv1d {
            x: self.clone(),
            filt: filt.clone(),
            bias: bias.clone(),
            axis,
        })
    }

    /// Softmax over the last axis.
    pub fn row_softmax(&self) -> Result<Tensor> {
        let s = self.shape();
        if s.is_empty() {
            return Err(Error::InvalidShape {
                op: "row-softmax",
                shape: s.to_vec(),
                reason: "requires rank >= 1".into(),
            });
        }
        let cols = s[s.len() - 1];
        let rows = self.numel() / cols;
        let buf = match self.buf().as_ref() {
            Buf::F32(x) => Buf::F32(kernels::softmax_rows(x, rows, cols)),
            Buf::F64(x) => Buf::F64(kernels::softmax_rows(x, rows, cols)),
        };
        if !buf.all_finite() {
            return Err(Error::NonFinite { op: "row-softmax" });
        }
        let y = Arc::new(buf);
        let op = if self.tracked() {
            Some(Op::RowSoftmax {
                x: self.clone(),
                y: Arc::clone(&y),
            })
        } else {
            None
        };
        Ok(Tensor::from_parts(s.to_vec(), y, false, op))
    }

    /// Normalization over the last axis (no affine part).
    pub fn layer_norm(&self, eps: f64) -> Result<Tensor> {
        let s = self.shape();
        if s.is_empty() {
            return Err(Error::InvalidShape {
                op: "layernorm",
                shape: s.to_vec(),
                reason: "requires rank >= 1".into(),
            });
        }
        let cols = s[s.len() - 1];
        let rows = self.numel() / cols;
        let (buf, inv_std) = match self.buf().as_ref() {
            Buf::F32(x) => {
                let (y, i) = kernels::layernorm_rows(x, rows, cols, eps);
                (Buf::F32(y), Buf::F32(i))
            }
            Buf::F64(x) => {
                let (y, i) = kernels::layernorm_rows(x, rows, cols, eps);
                (Buf::F64(y), Buf::F64(i))
            }
        };
        if !buf.all_finite() {
            return Err(Error::NonFinite { op: "layernorm" });
        }
        let y = Arc::new(buf);
        let op = if self.tracked() {
            Some(Op::LayerNorm {
                x: self.clone(),
                y: Arc::clone(&y),
                inv_std,
            })
        } else {
            None
        };
        Ok(Tensor::from_parts(s.to_vec(), y, false, op))
    }

    pub fn gelu(&self) -> Result<Tensor> {
        let buf = match self.buf().as_ref() {
            Buf::F32(x) => Buf::F32(kernels::gelu(x)),
            Buf::F64(x) => Buf::F64(kernels::gelu(x)),
        };
        finish("gelu", self.shape().to_vec(), buf, self.tracked(), || Op::Gelu {
            x: self.clone(),
        })
    }

    pub fn silu(&self) -> Result<Tensor> {
        let buf = match self.buf().as_ref() {
            Buf::F32(x) => Buf::F32(kernels::silu(x)),
            Buf::F64(x) => Buf::F64(kernels::silu(x)),
        };
        finish("silu", self.shape().to_vec(), buf, self.tracked(), || Op::Silu {
            x: self.clone(),
        })
    }

    /// Elementwise sum with right-aligned broadcasting.
    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        same_dtype("add", self, other)?;
        let out_shape = broadcast_shape("add", self.shape(), other.shape())?;
        let buf = zip_bufs!(
            "add",
            self.buf().as_ref(),
            other.buf().as_ref(),
            |x, y| kernels::broadcast_zip(x, self.shape(), y, other.shape(), &out_shape, |a, b| a + b),
            |x, y| kernels::broadcast_zip(x, self.shape(), y, other.shape(), &out_shape, |a, b| a + b)
        );
        let tracked = self.tracked() || other.tracked();
        finish("add", out_shape, buf, tracked, || Op::Add {
            a: self.clone(),
            b: other.clone(),
        })
    }

    /// Elementwise product with right-aligned broadcasting.
    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        same_dtype("mul", self, other)?;
        let out_shape = broadcast_shape("mul", self.shape(), other.shape())?;
        let buf = zip_bufs!(
            "mul",
            self.buf().as_ref(),
            other.buf().as_ref(),
            |x, y| kernels::broadcast_zip(x, self.shape(), y, other.shape(), &out_shape, |a, b| a * b),
            |x, y| kernels::broadcast_zip(x, self.shape(), y, other.shape(), &out_shape, |a, b| a * b)
        );
        let tracked = self.tracked() || other.tracked();
        finish("mul", out_shape, buf, tracked, || Op::Mul {
            a: self.clone(),
            b: other.clone(),
        })
    }

    /// Multiply by a scalar constant.
    pub fn scale(&self, s: f64) -> Result<Tensor> {
        let buf = match self.buf().as_ref() {
            Buf::F32(x) => Buf::F32(x.iter().map(|&v| v * s as f32).collect()),
            Buf::F64(x) => Buf::F64(x.iter().map(|&v| v * s).collect()),
        };
        finish("scale", self.shape().to_vec(), buf, self.tracked(), || Op::Scale {
            x: self.clone(),
            s,
        })
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.add(&other.scale(-1.0)?)
    }

    /// Sum of all elements, as a scalar tensor.
    pub fn sum_all(&self) -> Result<Tensor> {
        let total = match self.buf().as_ref() {
            Buf::F32(x) => {
                let mut acc = 0.0f32;
                for &v in x {
                    acc += v;
                }
                Buf::F32(vec![acc])
            }
            Buf::F64(x) => {
                let mut acc = 0.0f64;
                for &v in x {
                    acc += v;
                }
                Buf::F64(vec![acc])
            }
        };
        finish("sum", Vec::new(), total, self.tracked(), || Op::Sum { x: self.clone() })
    }

    /// Mean of all elements, as a scalar tensor.
    pub fn mean_all(&self) -> Result<Tensor> {
        let n = self.numel();
        if n == 0 {
            return Err(Error::InvalidShape {
                op: "mean",
                shape: self.shape().to_vec(),
                reason: "empty tensor".into(),
            });
        }
        let total = match self.buf().as_ref() {
            Buf::F32(x) => {
                let mut acc = 0.0f32;
                for &v in x {
                    acc += v;
                }
                Buf::F32(vec![acc / n as f32])
            }
            Buf::F64(x) => {
                let mut acc = 0.0f64;
                for &v in x {
                    acc += v;
                }
                Buf::F64(vec![acc / n as f64])
            }
        };
        finish("mean", Vec::new(), total, self.tracked(), || Op::Mean { x: self.clone() })
    }

    /// Same data, new shape. Shares the buffer.
    pub fn reshape(&self, new_shape: &[usize]) -> Result<Tensor> {
        let numel: usize = new_shape.iter().product();
        if numel != self.numel() {
            return Err(Error::InvalidShape {
                op: "reshape",
                shape: new_shape.to_vec(),
                reason: format!("element count {} != {}", numel, self.numel()),
            });
        }
        let op = if self.tracked() {
            Some(Op::Reshape { x: self.clone() })
        } else {
            None
        };
        Ok(Tensor::from_parts(
            new_shape.to_vec(),
            Arc::clone(self.buf()),
            false,
            op,
        ))
    }

    /// General axis permutation; `transpose` in the primitive set.
    pub fn permute(&self, perm: &[usize]) -> Result<Tensor> {
        let rank = self.shape().len();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::InvalidShape {
                op: "transpose",
                shape: self.shape().to_vec(),
                reason: format!("invalid permutation {perm:?}"),
            });
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| self.shape()[p]).collect();
        let buf = match self.buf().as_ref() {
            Buf::F32(x) => Buf::F32(kernels::permute(x, self.shape(), perm)),
            Buf::F64(x) => Buf::F64(kernels::permute(x, self.shape(), perm)),
        };
        finish("transpose", out_shape, buf, self.tracked(), || Op::Permute {
            x: self.clone(),
            perm: perm.to_vec(),
        })
    }

    /// Swap the last two axes.
    pub fn transpose_last(&self) -> Result<Tensor> {
        let rank = self.shape().len();
        if rank < 2 {
            return Err(Error::InvalidShape {
                op: "transpose",
                shape: self.shape().to_vec(),
                reason: "requires rank >= 2".into(),
            });
        }
        let mut perm: Vec<usize> = (0..rank).collect();
        perm.swap(rank - 2, rank - 1);
        self.permute(&perm)
    }

    /// Contiguous slice `start..start+len` along `axis`.
    pub fn slice(&self, axis: usize, start: usize, len: usize) -> Result<Tensor> {
        let s = self.shape();
        if axis >= s.len() || start + len > s[axis] || len == 0 {
            return Err(Error::InvalidShape {
                op: "slice",
                shape: s.to_vec(),
                reason: format!("axis {axis}, range {start}..{}", start + len),
            });
        }
        let outer: usize = s[..axis].iter().product();
        let inner: usize = s[axis + 1..].iter().product();
        let mut out_shape = s.to_vec();
        out_shape[axis] = len;

        fn do_slice<T: Copy>(
            x: &[T],
            outer: usize,
            dim: usize,
            inner: usize,
            start: usize,
            len: usize,
        ) -> Vec<T> {
            let mut out = Vec::with_capacity(outer * len * inner);
            for o in 0..outer {
                let base = (o * dim + start) * inner;
                out.extend_from_slice(&x[base..base + len * inner]);
            }
            out
        }

        let dim = s[axis];
        let buf = match self.buf().as_ref() {
            Buf::F32(x) => Buf::F32(do_slice(x, outer, dim, inner, start, len)),
            Buf::F64(x) => Buf::F64(do_slice(x, outer, dim, inner, start, len)),
        };
        finish("slice", out_shape, buf, self.tracked(), || Op::Slice {
            x: self.clone(),
            axis,
            start,
        })
    }

    /// Gather rows of a `[V, D]` table by index.
    pub fn embedding_lookup(&self, ids: &[usize]) -> Result<Tensor> {
        let s = self.shape();
        if s.len() != 2 {
            return Err(Error::InvalidShape {
                op: "embedding-lookup",
                shape: s.to_vec(),
                reason: "table must be rank 2".into(),
            });
        }
        let (v, d) = (s[0], s[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::InvalidArgument(format!(
                "embedding-lookup: index {bad} out of range for table with {v} rows"
            )));
        }
        fn gather<T: Copy>(x: &[T], ids: &[usize], d: usize) -> Vec<T> {
            let mut out = Vec::with_capacity(ids.len() * d);
            for &i in ids {
                out.extend_from_slice(&x[i * d..(i + 1) * d]);
            }
            out
        }
        let buf = match self.buf().as_ref() {
            Buf::F32(x) => Buf::F32(gather(x, ids, d)),
            Buf::F64(x) => Buf::F64(gather(x, ids, d)),
        };
        let ids = Arc::new(ids.to_vec());
        finish("embedding-lookup", vec![ids.len(), d], buf, self.tracked(), || {
            Op::EmbeddingLookup {
                table: self.clone(),
                ids,
            }
        })
    }

    /// Elementwise absolute value (used by the regression objectives; not
    /// part of the operator primitive set).
    pub fn abs_elem(&self) -> Result<Tensor> {
        let buf = match self.buf().as_ref() {
            Buf::F32(x) => Buf::F32(x.iter().map(|&v| v.abs()).collect()),
            Buf::F64(x) => Buf::F64(x.iter().map(|&v| v.abs()).collect()),
        };
        finish("abs", self.shape().to_vec(), buf, self.tracked(), || Op::Abs {
            x: self.clone(),
        })
    }

    /// Elementwise Huber penalty of a residual (objective helper).
    pub fn huber_elem(&self, delta: f64) -> Result<Tensor> {
        if delta <= 0.0 {
            return Err(Error::InvalidArgument(format!(
                "huber: delta must be positive, got {delta}"
            )));
        }
        fn hub<T: super::Scalar>(x: &[T], delta: f64) -> Vec<T> {
            let d = T::from_f64(delta);
            let half = T::from_f64(0.5);
            x.iter()
                .map(|&r| {
                    let a = r.abs();
                    if a <= d {
                        half * r * r
                    } else {
                        d * (a - half * d)
                    }
                })
                .collect()
        }
        let buf = match self.buf().as_ref() {
            Buf::F32(x) => Buf::F32(hub(x, delta)),
            Buf::F64(x) => Buf::F64(hub(x, delta)),
        };
        finish("huber", self.shape().to_vec(), buf, self.tracked(), || Op::Huber {
            x: self.clone(),
            delta,
        })
    }
}

/// Concatenate along the last axis. All other dims must agree.
pub fn concat_last_dim(parts: &[&Tensor]) -> Result<Tensor> {
    if parts.is_empty() {
        return Err(Error::InvalidArgument("concat-last-dim: no inputs".into()));
    }
    let first = parts[0];
    let lead = &first.shape()[..first.shape().len() - 1];
    for p in parts.iter().skip(1) {
        same_dtype("concat-last-dim", first, p)?;
        if p.shape().len() != first.shape().len() || &p.shape()[..p.shape().len() - 1] != lead {
            return Err(Error::ShapeMismatch {
                op: "concat-last-dim",
                lhs: first.shape().to_vec(),
                rhs: p.shape().to_vec(),
            });
        }
    }
    let rows: usize = lead.iter().product();
    let widths: Vec<usize> = parts.iter().map(|p| p.shape()[p.shape().len() - 1]).collect();
    let total: usize = widths.iter().sum();
    let mut out_shape = lead.to_vec();
    out_shape.push(total);

    fn cat<T: Copy>(parts: &[&[T]], widths: &[usize], rows: usize, total: usize) -> Vec<T> {
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (p, &w) in parts.iter().zip(widths) {
                out.extend_from_slice(&p[r * w..(r + 1) * w]);
            }
        }
        out
    }

    let buf = match first.buf().as_ref() {
        Buf::F32(_) => {
            let slices: Vec<&[f32]> = parts.iter().map(|p| p.buf().as_f32()).collect();
            Buf::F32(cat(&slices, &widths, rows, total))
        }
        Buf::F64(_) => {
            let slices: Vec<&[f64]> = parts.iter().map(|p| p.buf().as_f64()).collect();
            Buf::F64(cat(&slices, &widths, rows, total))
        }
    };
    let tracked = parts.iter().any(|p| p.tracked());
    let owned: Vec<Tensor> = parts.iter().map(|p| (*p).clone()).collect();
    finish("concat-last-dim", out_shape, buf, tracked, || Op::ConcatLastDim {
        parts: owned,
    })
}

/// The closed primitive set, addressable by id for exhaustive testing.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PrimitiveId {
    Matmul,
    BatchedMatmul,
    DepthwiseCausalConv1d,
    RowSoftmax,
    LayerNorm,
    Gelu,
    Silu,
    Add,
    Mul,
    Scale,
    Sum,
    Mean,
    Reshape,
    Transpose,
    ConcatLastDim,
    Slice,
    EmbeddingLookup,
}

pub const ALL_PRIMITIVES: [PrimitiveId; 17] = [
    PrimitiveId::Matmul,
    PrimitiveId::BatchedMatmul,
    PrimitiveId::DepthwiseCausalConv1d,
    PrimitiveId::RowSoftmax,
    PrimitiveId::LayerNorm,
    PrimitiveId::Gelu,
    PrimitiveId::Silu,
    PrimitiveId::Add,
    PrimitiveId::Mul,
    PrimitiveId::Scale,
    PrimitiveId::Sum,
    PrimitiveId::Mean,
    PrimitiveId::Reshape,
    PrimitiveId::Transpose,
    PrimitiveId::ConcatLastDim,
    PrimitiveId::Slice,
    PrimitiveId::EmbeddingLookup,
];

/// Attributes for primitives that carry them.
#[derive(Debug, Default, Clone)]
pub struct PrimitiveAttrs {
    pub scale: Option<f64>,
    pub eps: Option<f64>,
    pub new_shape: Option<Vec<usize>>,
    pub perm: Option<Vec<usize>>,
    /// (axis, start, len)
    pub slice: Option<(usize, usize, usize)>,
    pub ids: Option<Vec<usize>>,
    pub conv_axis: Option<ConvAxis>,
}

/// Uniform dispatcher over the primitive set.
pub fn primitive_forward(
    id: PrimitiveId,
    inputs: &[&Tensor],
    attrs: &PrimitiveAttrs,
) -> Result<Tensor> {
    let need = |n: usize| -> Result<()> {
        if inputs.len() != n {
            return Err(Error::InvalidArgument(format!(
                "{id:?}: expected {n} inputs, got {}",
                inputs.len()
            )));
        }
        Ok(())
    };
    match id {
        PrimitiveId::Matmul => {
            need(2)?;
            inputs[0].matmul(inputs[1])
        }
        PrimitiveId::BatchedMatmul => {
            need(2)?;
            inputs[0].bmm(inputs[1])
        }
        PrimitiveId::DepthwiseCausalConv1d => {
            need(3)?;
            inputs[0].conv1d_depthwise_causal(
                inputs[1],
                inputs[2],
                attrs.conv_axis.unwrap_or(ConvAxis::Sequence),
            )
        }
        PrimitiveId::RowSoftmax => {
            need(1)?;
            inputs[0].row_softmax()
        }
        PrimitiveId::LayerNorm => {
            need(1)?;
            inputs[0].layer_norm(attrs.eps.unwrap_or(1e-6))
        }
        PrimitiveId::Gelu => {
            need(1)?;
            inputs[0].gelu()
        }
        PrimitiveId::Silu => {
            need(1)?;
            inputs[0].silu()
        }
        PrimitiveId::Add => {
            need(2)?;
            inputs[0].add(inputs[1])
        }
        PrimitiveId::Mul => {
            need(2)?;
            inputs[0].mul(inputs[1])
        }
        PrimitiveId::Scale => {
            need(1)?;
            inputs[0].scale(attrs.scale.unwrap_or(1.0))
        }
        PrimitiveId::Sum => {
            need(1)?;
            inputs[0].sum_all()
        }
        PrimitiveId::Mean => {
            need(1)?;
            inputs[0].mean_all()
        }
        PrimitiveId::Reshape => {
            need(1)?;
            let shape = attrs
                .new_shape
                .as_ref()
                .ok_or_else(|| Error::InvalidArgument("reshape: missing new_shape".into()))?;
            inputs[0].reshape(shape)
        }
        PrimitiveId::Transpose => {
            need(1)?;
            let perm = attrs
                .perm
                .as_ref()
                .ok_or_else(|| Error::InvalidArgument("transpose: missing perm".into()))?;
            inputs[0].permute(perm)
        }
        PrimitiveId::ConcatLastDim => concat_last_dim(inputs),
        PrimitiveId::Slice => {
            need(1)?;
            let (axis, start, len) = attrs
                .slice
                .ok_or_else(|| Error::InvalidArgument("slice: missing bounds".into()))?;
            inputs[0].slice(axis, start, len)
        }
        PrimitiveId::EmbeddingLookup => {
            need(1)?;
            let ids = attrs
                .ids
                .as_ref()
                .ok_or_else(|| Error::InvalidArgument("embedding-lookup: missing ids".into()))?;
            inputs[0].embedding_lookup(ids)
        }
    }
}
