//! Reverse-mode differentiation over the recorded op graph.

use super::kernels;
use super::ops::{ConvAxis, Op};
use super::{Buf, Tensor};
use crate::error::{Error, Result};
use std::collections::HashSet;

/// Ordered record of the primitive applications reachable from a root,
/// in topological order (inputs before outputs). One backward traversal
/// visits each node exactly once.
pub struct Tape {
    nodes: Vec<Tensor>,
}

impl Tape {
    /// Collect the compute history of `root`.
    pub fn trace(root: &Tensor) -> Tape {
        let mut order: Vec<Tensor> = Vec::new();
        let mut visited: HashSet<u64> = HashSet::new();
        // Iterative post-order DFS.
        let mut stack: Vec<(Tensor, bool)> = vec![(root.clone(), false)];
        while let Some((t, expanded)) = stack.pop() {
            if expanded {
                order.push(t);
                continue;
            }
            if !visited.insert(t.0.id) {
                continue;
            }
            let parents: Vec<Tensor> = match &t.0.op {
                Some(op) => op.parents().into_iter().cloned().collect(),
                None => Vec::new(),
            };
            stack.push((t, true));
            for p in parents {
                if !visited.contains(&p.0.id) {
                    stack.push((p, false));
                }
            }
        }
        Tape { nodes: order }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Node ids in tape order, with each node's parent ids.
    pub fn structure(&self) -> Vec<(u64, Vec<u64>)> {
        self.nodes
            .iter()
            .map(|t| {
                let parents = match &t.0.op {
                    Some(op) => op.parents().iter().map(|p| p.0.id).collect(),
                    None => Vec::new(),
                };
                (t.0.id, parents)
            })
            .collect()
    }

    fn run_backward(&self, root: &Tensor) -> Result<()> {
        root.accumulate_grad(Buf::from_f64_slice(root.dtype(), &[1.0]));
        for node in self.nodes.iter().rev() {
            let op = match &node.0.op {
                Some(op) => op,
                None => continue,
            };
            // Interior grads are consumed here; leaf grads persist.
            let g = match node.0.grad.borrow_mut().take() {
                Some(g) => g,
                None => continue, // no gradient flowed into this node
            };
            if !g.all_finite() {
                return Err(Error::NonFinite { op: "backward" });
            }
            backprop_node(node, op, &g)?;
            if node.0.requires_grad {
                node.accumulate_grad(g);
            }
        }
        Ok(())
    }
}

/// Run reverse-mode accumulation from a scalar loss. Every tracked leaf in
/// the loss's history receives (or accumulates) d(loss)/d(leaf).
pub fn backward(loss: &Tensor) -> Result<()> {
    if loss.numel() != 1 || !loss.shape().is_empty() {
        return Err(Error::NonScalarLoss {
            shape: loss.shape().to_vec(),
        });
    }
    if loss.0.op.is_none() && !loss.0.requires_grad {
        return Err(Error::DetachedLoss);
    }
    Tape::trace(loss).run_backward(loss)
}

impl Tensor {
    pub fn backward(&self) -> Result<()> {
        backward(self)
    }
}

fn contrib(t: &Tensor, grad: Buf) {
    if t.tracked() {
        t.accumulate_grad(grad);
    }
}

macro_rules! with_bufs {
    ($g:expr, $x:expr, |$gs:ident, $xs:ident| $body:expr) => {
        match ($g, $x) {
            (Buf::F32($gs), Buf::F32($xs)) => Buf::F32($body),
            (Buf::F64($gs), Buf::F64($xs)) => Buf::F64($body),
            _ => unreachable!("forward enforced matching dtypes"),
        }
    };
}

fn backprop_node(node: &Tensor, op: &Op, g: &Buf) -> Result<()> {
    match op {
        Op::Matmul { a, b } => {
            let (m, k) = (a.shape()[0], a.shape()[1]);
            let n = b.shape()[1];
            if a.tracked() {
                let da = with_bufs!(g, b.buf().as_ref(), |gs, bs| kernels::matmul_nt(gs, bs, m, n, k));
                contrib(a, da);
            }
            if b.tracked() {
                let db = with_bufs!(g, a.buf().as_ref(), |gs, as_| kernels::matmul_tn(as_, gs, k, m, n));
                contrib(b, db);
            }
        }
        Op::BatchedMatmul { a, b } => {
            let ra = a.shape().len();
            let batch: usize = a.shape()[..ra - 2].iter().product();
            let (m, k) = (a.shape()[ra - 2], a.shape()[ra - 1]);
            let n = b.shape()[ra - 1];
            if a.tracked() {
                let da = with_bufs!(g, b.buf().as_ref(), |gs, bs| {
                    let mut out = Vec::with_capacity(batch * m * k);
                    for bi in 0..batch {
                        out.extend(kernels::matmul_nt(
                            &gs[bi * m * n..(bi + 1) * m * n],
                            &bs[bi * k * n..(bi + 1) * k * n],
                            m,
                            n,
                            k,
                        ));
                    }
                    out
                });
                contrib(a, da);
            }
            if b.tracked() {
                let db = with_bufs!(g, a.buf().as_ref(), |gs, as_| {
                    let mut out = Vec::with_capacity(batch * k * n);
                    for bi in 0..batch {
                        out.extend(kernels::matmul_tn(
                            &as_[bi * m * k..(bi + 1) * m * k],
                            &gs[bi * m * n..(bi + 1) * m * n],
                            k,
                            m,
                            n,
                        ));
                    }
                    out
                });
                contrib(b, db);
            }
        }
        Op::Conv1d { x, filt, bias, axis } => {
            let s = x.shape();
            let (b, n, c) = (s[0], s[1], s[2]);
            let k = filt.shape()[1];
            // The three grads come out of one sweep; split afterwards.
            let (dx, df, dbias) = match (g, x.buf().as_ref(), filt.buf().as_ref()) {
                (Buf::F32(gs), Buf::F32(xs), Buf::F32(fs)) => {
                    let (dx, df, db) = match axis {
                        ConvAxis::Sequence => kernels::conv1d_seq_backward(gs, xs, fs, b, n, c, k),
                        ConvAxis::Channel => kernels::conv1d_chan_backward(gs, xs, fs, b * n, c, k),
                    };
                    (Buf::F32(dx), Buf::F32(df), Buf::F32(db))
                }
                (Buf::F64(gs), Buf::F64(xs), Buf::F64(fs)) => {
                    let (dx, df, db) = match axis {
                        ConvAxis::Sequence => kernels::conv1d_seq_backward(gs, xs, fs, b, n, c, k),
                        ConvAxis::Channel => kernels::conv1d_chan_backward(gs, xs, fs, b * n, c, k),
                    };
                    (Buf::F64(dx), Buf::F64(df), Buf::F64(db))
                }
                _ => unreachable!("forward enforced matching dtypes"),
            };
            contrib(x, dx);
            contrib(filt, df);
            contrib(bias, dbias);
        }
        Op::RowSoftmax { x, y } => {
            let cols = *x.shape().last().unwrap();
            let rows = x.numel() / cols;
            let dx = with_bufs!(g, y.as_ref(), |gs, ys| kernels::softmax_rows_backward(
                gs, ys, rows, cols
            ));
            contrib(x, dx);
        }
        Op::LayerNorm { x, y, inv_std } => {
            let cols = *x.shape().last().unwrap();
            let rows = x.numel() / cols;
            let dx = match (g, y.as_ref(), inv_std) {
                (Buf::F32(gs), Buf::F32(ys), Buf::F32(is)) => {
                    Buf::F32(kernels::layernorm_rows_backward(gs, ys, is, rows, cols))
                }
                (Buf::F64(gs), Buf::F64(ys), Buf::F64(is)) => {
                    Buf::F64(kernels::layernorm_rows_backward(gs, ys, is, rows, cols))
                }
                _ => unreachable!("forward enforced matching dtypes"),
            };
            contrib(x, dx);
        }
        Op::Gelu { x } => {
            let dx = with_bufs!(g, x.buf().as_ref(), |gs, xs| kernels::gelu_backward(gs, xs));
            contrib(x, dx);
        }
        Op::Silu { x } => {
            let dx = with_bufs!(g, x.buf().as_ref(), |gs, xs| kernels::silu_backward(gs, xs));
            contrib(x, dx);
        }
        Op::Add { a, b } => {
            let out_shape = node.shape();
            if a.tracked() {
                let da = match g {
                    Buf::F32(gs) => Buf::F32(kernels::reduce_to_shape(gs, out_shape, a.shape())),
                    Buf::F64(gs) => Buf::F64(kernels::reduce_to_shape(gs, out_shape, a.shape())),
                };
                contrib(a, da);
            }
            if b.tracked() {
                let db = match g {
                    Buf::F32(gs) => Buf::F32(kernels::reduce_to_shape(gs, out_shape, b.shape())),
                    Buf::F64(gs) => Buf::F64(kernels::reduce_to_shape(gs, out_shape, b.shape())),
                };
                contrib(b, db);
            }
        }
        Op::Mul { a, b } => {
            let out_shape = node.shape();
            if a.tracked() {
                let da = with_bufs!(g, b.buf().as_ref(), |gs, bs| {
                    let gb = kernels::broadcast_zip(gs, out_shape, bs, b.shape(), out_shape, |x, y| x * y);
                    kernels::reduce_to_shape(&gb, out_shape, a.shape())
                });
                contrib(a, da);
            }
            if b.tracked() {
                let db = with_bufs!(g, a.buf().as_ref(), |gs, as_| {
                    let ga = kernels::broadcast_zip(gs, out_shape, as_, a.shape(), out_shape, |x, y| x * y);
                    kernels::reduce_to_shape(&ga, out_shape, b.shape())
                });
                contrib(b, db);
            }
        }
        Op::Scale { x, s } => {
            let dx = match g {
                Buf::F32(gs) => Buf::F32(gs.iter().map(|&v| v * *s as f32).collect()),
                Buf::F64(gs) => Buf::F64(gs.iter().map(|&v| v * s).collect()),
            };
            contrib(x, dx);
        }
        Op::Sum { x } => {
            let n = x.numel();
            let dx = match g {
                Buf::F32(gs) => Buf::F32(vec![gs[0]; n]),
                Buf::F64(gs) => Buf::F64(vec![gs[0]; n]),
            };
            contrib(x, dx);
        }
        Op::Mean { x } => {
            let n = x.numel();
            let dx = match g {
                Buf::F32(gs) => Buf::F32(vec![gs[0] / n as f32; n]),
                Buf::F64(gs) => Buf::F64(vec![gs[0] / n as f64; n]),
            };
            contrib(x, dx);
        }
        Op::Reshape { x } => {
            contrib(x, g.clone());
        }
        Op::Permute { x, perm } => {
            let out_dims = node.shape();
            let mut inv = vec![0usize; perm.len()];
            for (i, &p) in perm.iter().enumerate() {
                inv[p] = i;
            }
            let dx = match g {
                Buf::F32(gs) => Buf::F32(kernels::permute(gs, out_dims, &inv)),
                Buf::F64(gs) => Buf::F64(kernels::permute(gs, out_dims, &inv)),
            };
            contrib(x, dx);
        }
        Op::ConcatLastDim { parts } => {
            let total = *node.shape().last().unwrap();
            let rows = node.numel() / total;
            let mut offset = 0usize;
            for p in parts {
                let w = *p.shape().last().unwrap();
                if p.tracked() {
                    fn split<T: Copy>(g: &[T], rows: usize, total: usize, offset: usize, w: usize) -> Vec<T> {
                        let mut out = Vec::with_capacity(rows * w);
                        for r in 0..rows {
                            out.extend_from_slice(&g[r * total + offset..r * total + offset + w]);
                        }
                        out
                    }
                    let dp = match g {
                        Buf::F32(gs) => Buf::F32(split(gs, rows, total, offset, w)),
                        Buf::F64(gs) => Buf::F64(split(gs, rows, total, offset, w)),
                    };
                    contrib(p, dp);
                }
                offset += w;
            }
        }
        Op::Slice { x, axis, start } => {
            let s = x.shape();
            let outer: usize = s[..*axis].iter().product();
            let inner: usize = s[*axis + 1..].iter().product();
            let dim = s[*axis];
            let len = node.shape()[*axis];
            fn scatter<T: Copy + Default>(
                g: &[T],
                outer: usize,
                dim: usize,
                inner: usize,
                start: usize,
                len: usize,
                total: usize,
            ) -> Vec<T> {
                let mut out = vec![T::default(); total];
                for o in 0..outer {
                    let dst = (o * dim + start) * inner;
                    let src = o * len * inner;
                    out[dst..dst + len * inner].copy_from_slice(&g[src..src + len * inner]);
                }
                out
            }
            let dx = match g {
                Buf::F32(gs) => Buf::F32(scatter(gs, outer, dim, inner, *start, len, x.numel())),
                Buf::F64(gs) => Buf::F64(scatter(gs, outer, dim, inner, *start, len, x.numel())),
            };
            contrib(x, dx);
        }
        Op::EmbeddingLookup { table, ids } => {
            let d = table.shape()[1];
            fn scatter_rows<T: Copy + std::ops::AddAssign + Default>(
                g: &[T],
                ids: &[usize],
                v: usize,
                d: usize,
            ) -> Vec<T> {
                let mut out = vec![T::default(); v * d];
                for (r, &id) in ids.iter().enumerate() {
                    for j in 0..d {
                        out[id * d + j] += g[r * d + j];
                    }
                }
                out
            }
            let v = table.shape()[0];
            let dt = match g {
                Buf::F32(gs) => Buf::F32(scatter_rows(gs, ids, v, d)),
                Buf::F64(gs) => Buf::F64(scatter_rows(gs, ids, v, d)),
            };
            contrib(table, dt);
        }
        Op::Abs { x } => {
            fn sign_mul<T: super::Scalar>(g: &[T], x: &[T]) -> Vec<T> {
                g.iter()
                    .zip(x)
                    .map(|(&gv, &xv)| {
                        if xv > T::ZERO {
                            gv
                        } else if xv < T::ZERO {
                            -gv
                        } else {
                            T::ZERO
                        }
                    })
                    .collect()
            }
            let dx = with_bufs!(g, x.buf().as_ref(), |gs, xs| sign_mul(gs, xs));
            contrib(x, dx);
        }
        Op::Huber { x, delta } => {
            fn clamp_mul<T: super::Scalar>(g: &[T], x: &[T], delta: f64) -> Vec<T> {
                let d = T::from_f64(delta);
                g.iter()
                    .zip(x)
                    .map(|(&gv, &xv)| {
                        let c = if xv > d {
                            d
                        } else if xv < -d {
                            -d
                        } else {
                            xv
                        };
                        gv * c
                    })
                    .collect()
            }
            let dx = with_bufs!(g, x.buf().as_ref(), |gs, xs| clamp_mul(gs, xs, *delta));
            contrib(x, dx);
        }
    }
    Ok(())
}
