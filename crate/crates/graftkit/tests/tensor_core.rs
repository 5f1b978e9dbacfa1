//! Primitive-level checks: worked examples, gradient verification for the
//! whole primitive set, and structural tape invariants.

use graftkit::rng::Rng;
use graftkit::tensor::{
    concat_last_dim, grad_check, grad_check_against, primitive_forward, ConvAxis, PrimitiveAttrs,
    PrimitiveId, Tape, Tensor, ALL_PRIMITIVES,
};
use graftkit::{DType, Error};

fn randn(shape: &[usize], rng: &mut Rng) -> Tensor {
    Tensor::randn(shape, 1.0, rng, DType::F64)
}

#[test]
fn row_softmax_symmetry() {
    let x = Tensor::from_f64(&[1, 2], vec![0.0, 0.0]).unwrap();
    let y = x.row_softmax().unwrap();
    assert_eq!(y.data_f64(), vec![0.5, 0.5]);
}

#[test]
fn conv_delta_kernel_is_identity() {
    let x = Tensor::from_f64(&[1, 3, 1], vec![1.0, 2.0, 3.0]).unwrap();
    let filt = Tensor::from_f64(&[1, 4], vec![1.0, 0.0, 0.0, 0.0]).unwrap();
    let bias = Tensor::zeros(&[1], DType::F64);
    let y = x
        .conv1d_depthwise_causal(&filt, &bias, ConvAxis::Sequence)
        .unwrap();
    assert_eq!(y.data_f64(), vec![1.0, 2.0, 3.0]);
}

#[test]
fn matmul_identity() {
    let a = Tensor::from_f64(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    let eye = Tensor::from_f64(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
    let y = a.matmul(&eye).unwrap();
    assert_eq!(y.data_f64(), vec![1.0, 2.0, 3.0, 4.0]);
}

#[test]
fn sum_of_squares_gradient() {
    let x = Tensor::from_f64(&[3], vec![1.0, -2.0, 3.0]).unwrap().trainable();
    let loss = x.mul(&x).unwrap().sum_all().unwrap();
    loss.backward().unwrap();
    assert_eq!(x.grad_f64().unwrap(), vec![2.0, -4.0, 6.0]);
}

#[test]
fn softmax_sum_loss_gradient_vanishes() {
    let mut rng = Rng::new(1);
    let x = randn(&[3, 5], &mut rng).trainable();
    let loss = x.row_softmax().unwrap().sum_all().unwrap();
    loss.backward().unwrap();
    for g in x.grad_f64().unwrap() {
        assert!(g.abs() < 1e-12, "grad {g} should vanish");
    }
}

#[test]
fn matmul_gradients_match_finite_differences() {
    let mut rng = Rng::new(2);
    let a0 = randn(&[3, 3], &mut rng);
    let b0 = randn(&[3, 3], &mut rng);
    // d/dA of sum(A @ B)
    let b = b0.detach();
    let rep = grad_check(
        move |a| a.matmul(&b)?.sum_all(),
        &a0,
        1e-5,
        1e-4,
    )
    .unwrap();
    assert!(rep.pass, "dA rel err {}", rep.max_rel_err);
    // d/dB of sum(A @ B)
    let a = a0.detach();
    let rep = grad_check(
        move |b| a.matmul(b)?.sum_all(),
        &b0,
        1e-5,
        1e-4,
    )
    .unwrap();
    assert!(rep.pass, "dB rel err {}", rep.max_rel_err);
}

#[test]
fn grad_check_sum_of_squares_passes() {
    let mut rng = Rng::new(3);
    let x = randn(&[8], &mut rng);
    let rep = grad_check(|x| x.mul(x)?.sum_all(), &x, 1e-5, 1e-4).unwrap();
    assert!(rep.pass, "rel err {}", rep.max_rel_err);
}

#[test]
fn grad_check_layernorm_mean_passes() {
    let mut rng = Rng::new(4);
    let x = randn(&[2, 4], &mut rng);
    let rep = grad_check(|x| x.layer_norm(1e-6)?.mean_all(), &x, 1e-5, 1e-4).unwrap();
    assert!(rep.pass, "rel err {}", rep.max_rel_err);
}

#[test]
fn grad_check_detects_sign_flip() {
    let mut rng = Rng::new(5);
    let x = randn(&[6], &mut rng);
    let wrong: Vec<f64> = x.data_f64().iter().map(|v| -2.0 * v).collect();
    let rep = grad_check_against(|x| x.mul(x)?.sum_all(), &wrong, &x, 1e-5, 1e-4).unwrap();
    assert!(!rep.pass, "flipped gradient must fail the check");
}

/// Loss used for primitive sweeps: sum(out * W) with fixed random weights so
/// gradients are nondegenerate even for row-stochastic outputs.
fn weighted_loss(out: &Tensor, rng: &mut Rng) -> Tensor {
    let w = Tensor::randn(out.shape(), 1.0, rng, DType::F64);
    out.mul(&w).unwrap().sum_all().unwrap()
}

struct PrimCase {
    id: PrimitiveId,
    inputs: Vec<Tensor>,
    attrs: PrimitiveAttrs,
}

fn dim(rng: &mut Rng, max: usize) -> usize {
    1 + rng.below(max)
}

fn cases_for(id: PrimitiveId, rng: &mut Rng) -> PrimCase {
    match id {
        PrimitiveId::Matmul => {
            let (m, k, n) = (dim(rng, 4), dim(rng, 16), dim(rng, 16));
            PrimCase {
                id,
                inputs: vec![randn(&[m, k], rng), randn(&[k, n], rng)],
                attrs: PrimitiveAttrs::default(),
            }
        }
        PrimitiveId::BatchedMatmul => {
            let (b, m, k, n) = (dim(rng, 4), dim(rng, 8), dim(rng, 8), dim(rng, 8));
            PrimCase {
                id,
                inputs: vec![randn(&[b, m, k], rng), randn(&[b, k, n], rng)],
                attrs: PrimitiveAttrs::default(),
            }
        }
        PrimitiveId::DepthwiseCausalConv1d => {
            let (b, n, c, k) = (dim(rng, 4), 2 + rng.below(14), dim(rng, 8), 1 + rng.below(4));
            let axis = if rng.below(2) == 0 {
                ConvAxis::Sequence
            } else {
                ConvAxis::Channel
            };
            PrimCase {
                id,
                inputs: vec![
                    randn(&[b, n, c], rng),
                    randn(&[c, k], rng),
                    randn(&[c], rng),
                ],
                attrs: PrimitiveAttrs {
                    conv_axis: Some(axis),
                    ..Default::default()
                },
            }
        }
        PrimitiveId::RowSoftmax | PrimitiveId::Gelu | PrimitiveId::Silu => PrimCase {
            id,
            inputs: vec![randn(&[dim(rng, 4), dim(rng, 16), dim(rng, 32)], rng)],
            attrs: PrimitiveAttrs::default(),
        },
        PrimitiveId::LayerNorm => PrimCase {
            id,
            inputs: vec![randn(&[dim(rng, 4), dim(rng, 16), 2 + rng.below(30)], rng)],
            attrs: PrimitiveAttrs {
                eps: Some(1e-6),
                ..Default::default()
            },
        },
        PrimitiveId::Add | PrimitiveId::Mul => {
            let shape = [dim(rng, 4), dim(rng, 16), dim(rng, 32)];
            // Exercise broadcasting on the second input half the time.
            let other: Vec<usize> = if rng.below(2) == 0 {
                shape.to_vec()
            } else {
                vec![shape[0], 1, shape[2]]
            };
            PrimCase {
                id,
                inputs: vec![randn(&shape, rng), randn(&other, rng)],
                attrs: PrimitiveAttrs::default(),
            }
        }
        PrimitiveId::Scale => PrimCase {
            id,
            inputs: vec![randn(&[dim(rng, 16), dim(rng, 32)], rng)],
            attrs: PrimitiveAttrs {
                scale: Some(rng.normal()),
                ..Default::default()
            },
        },
        PrimitiveId::Sum | PrimitiveId::Mean => PrimCase {
            id,
            inputs: vec![randn(&[dim(rng, 4), dim(rng, 16)], rng)],
            attrs: PrimitiveAttrs::default(),
        },
        PrimitiveId::Reshape => {
            let (a, b) = (dim(rng, 4), dim(rng, 16));
            PrimCase {
                id,
                inputs: vec![randn(&[a, b], rng)],
                attrs: PrimitiveAttrs {
                    new_shape: Some(vec![b, a]),
                    ..Default::default()
                },
            }
        }
        PrimitiveId::Transpose => {
            let shape = [dim(rng, 4), dim(rng, 8), dim(rng, 8)];
            PrimCase {
                id,
                inputs: vec![randn(&shape, rng)],
                attrs: PrimitiveAttrs {
                    perm: Some(vec![2, 0, 1]),
                    ..Default::default()
                },
            }
        }
        PrimitiveId::ConcatLastDim => {
            let (r, w1, w2) = (dim(rng, 8), dim(rng, 8), dim(rng, 8));
            PrimCase {
                id,
                inputs: vec![randn(&[r, w1], rng), randn(&[r, w2], rng)],
                attrs: PrimitiveAttrs::default(),
            }
        }
        PrimitiveId::Slice => {
            let n = 4 + rng.below(12);
            let start = rng.below(n - 1);
            let len = 1 + rng.below(n - start);
            PrimCase {
                id,
                inputs: vec![randn(&[dim(rng, 4), n], rng)],
                attrs: PrimitiveAttrs {
                    slice: Some((1, start, len)),
                    ..Default::default()
                },
            }
        }
        PrimitiveId::EmbeddingLookup => {
            let v = 4 + rng.below(8);
            let ids: Vec<usize> = (0..6).map(|_| rng.below(v)).collect();
            PrimCase {
                id,
                inputs: vec![randn(&[v, dim(rng, 8)], rng)],
                attrs: PrimitiveAttrs {
                    ids: Some(ids),
                    ..Default::default()
                },
            }
        }
    }
}

#[test]
fn every_primitive_backward_passes_grad_check() {
    let mut rng = Rng::new(42);
    for id in ALL_PRIMITIVES {
        for rep in 0..3 {
            let case = cases_for(id, &mut rng);
            let out = primitive_forward(
                id,
                &case.inputs.iter().collect::<Vec<_>>(),
                &case.attrs,
            )
            .unwrap();
            let mut wrng = rng.fork(rep as u64);
            let w = Tensor::randn(out.shape(), 1.0, &mut wrng, DType::F64);
            for probe in 0..case.inputs.len() {
                let inputs = case.inputs.clone();
                let attrs = case.attrs.clone();
                let w = w.clone();
                let report = grad_check(
                    move |x| {
                        let mut refs: Vec<&Tensor> = inputs.iter().collect();
                        refs[probe] = x;
                        let out = primitive_forward(id, &refs, &attrs)?;
                        out.mul(&w)?.sum_all()
                    },
                    &case.inputs[probe],
                    1e-5,
                    1e-4,
                )
                .unwrap();
                assert!(
                    report.pass,
                    "{id:?} input {probe} rep {rep}: rel err {}",
                    report.max_rel_err
                );
            }
        }
    }
}

#[test]
fn softmax_rows_are_stochastic() {
    let mut rng = Rng::new(7);
    for _ in 0..10 {
        let x = randn(&[4, 9], &mut rng);
        let y = x.row_softmax().unwrap();
        let data = y.data_f64();
        for r in 0..4 {
            let row = &data[r * 9..(r + 1) * 9];
            assert!(row.iter().all(|&v| v >= 0.0));
            let s: f64 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-6, "row sum {s}");
        }
    }
}

#[test]
fn causal_conv_ignores_the_future_exactly() {
    let mut rng = Rng::new(8);
    let (b, n, c, k) = (2, 12, 3, 4);
    let x1 = randn(&[b, n, c], &mut rng);
    let filt = randn(&[c, k], &mut rng);
    let bias = randn(&[c], &mut rng);
    // Perturb everything strictly after position s.
    let s = 5;
    let mut data = x1.data_f64();
    for bi in 0..b {
        for t in (s + 1)..n {
            for ch in 0..c {
                data[(bi * n + t) * c + ch] += 7.0;
            }
        }
    }
    let x2 = Tensor::from_f64(&[b, n, c], data).unwrap();
    let y1 = x1
        .conv1d_depthwise_causal(&filt, &bias, ConvAxis::Sequence)
        .unwrap()
        .data_f64();
    let y2 = x2
        .conv1d_depthwise_causal(&filt, &bias, ConvAxis::Sequence)
        .unwrap()
        .data_f64();
    for bi in 0..b {
        for t in 0..=s {
            for ch in 0..c {
                let i = (bi * n + t) * c + ch;
                assert_eq!(y1[i], y2[i], "position {t} must be bit-identical");
            }
        }
    }
}

#[test]
fn reshape_and_transpose_roundtrips_are_bit_identical() {
    let mut rng = Rng::new(9);
    let x = Tensor::randn(&[3, 4, 5], 1.0, &mut rng, DType::F32);
    let r = x.reshape(&[5, 12]).unwrap().reshape(&[3, 4, 5]).unwrap();
    assert_eq!(r.buf().as_f32(), x.buf().as_f32());
    let p = x.permute(&[2, 0, 1]).unwrap().permute(&[1, 2, 0]).unwrap();
    assert_eq!(p.buf().as_f32(), x.buf().as_f32());
}

#[test]
fn repeated_backward_accumulates() {
    let x = Tensor::from_f64(&[2], vec![1.0, 2.0]).unwrap().trainable();
    let loss = x.mul(&x).unwrap().sum_all().unwrap();
    loss.backward().unwrap();
    assert_eq!(x.grad_f64().unwrap(), vec![2.0, 4.0]);
    let loss2 = x.mul(&x).unwrap().sum_all().unwrap();
    loss2.backward().unwrap();
    assert_eq!(x.grad_f64().unwrap(), vec![4.0, 8.0]);
    x.zero_grad();
    assert!(x.grad_f64().is_none());
}

#[test]
fn non_scalar_loss_rejected() {
    let x = Tensor::from_f64(&[2], vec![1.0, 2.0]).unwrap().trainable();
    let y = x.mul(&x).unwrap();
    match y.backward() {
        Err(Error::NonScalarLoss { shape }) => assert_eq!(shape, vec![2]),
        other => panic!("expected NonScalarLoss, got {other:?}"),
    }
}

#[test]
fn detached_loss_rejected() {
    let x = Tensor::from_f64(&[2], vec![1.0, 2.0]).unwrap().trainable();
    let loss = x.mul(&x).unwrap().sum_all().unwrap().detach();
    match loss.backward() {
        Err(Error::DetachedLoss) => {}
        other => panic!("expected DetachedLoss, got {other:?}"),
    }
}

#[test]
fn shape_mismatch_names_primitive_and_shapes() {
    let a = Tensor::zeros(&[2, 3], DType::F64);
    let b = Tensor::zeros(&[4, 5], DType::F64);
    let err = a.matmul(&b).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("matmul"), "{msg}");
    assert!(msg.contains("[2, 3]") && msg.contains("[4, 5]"), "{msg}");
}

#[test]
fn non_finite_output_rejected() {
    let big = Tensor::from_f64(&[1], vec![1e308]).unwrap();
    match big.mul(&big) {
        Err(Error::NonFinite { op }) => assert_eq!(op, "mul"),
        other => panic!("expected NonFinite, got {other:?}"),
    }
}

#[test]
fn tape_is_topologically_ordered_and_visits_once() {
    let mut rng = Rng::new(10);
    let x = randn(&[3, 3], &mut rng).trainable();
    let y = randn(&[3, 3], &mut rng).trainable();
    let a = x.matmul(&y).unwrap();
    let b = a.gelu().unwrap();
    // Diamond: both branches reuse `a`.
    let c = a.add(&b).unwrap();
    let loss = c.sum_all().unwrap();
    let tape = Tape::trace(&loss);
    let structure = tape.structure();
    let mut seen = std::collections::HashSet::new();
    for (id, parents) in &structure {
        for p in parents {
            assert!(seen.contains(p), "parent {p} must precede node {id}");
        }
        assert!(seen.insert(*id), "node {id} appears twice");
    }
    // Gradient through the diamond: d/dx sum(A + gelu(A)) visits A once.
    loss.backward().unwrap();
    assert!(x.grad_f64().is_some());
}

#[test]
fn concat_and_slice_are_inverse() {
    let mut rng = Rng::new(11);
    let a = randn(&[4, 3], &mut rng);
    let b = randn(&[4, 5], &mut rng);
    let cat = concat_last_dim(&[&a, &b]).unwrap();
    assert_eq!(cat.shape(), &[4, 8]);
    let a2 = cat.slice(1, 0, 3).unwrap();
    let b2 = cat.slice(1, 3, 5).unwrap();
    assert_eq!(a2.data_f64(), a.data_f64());
    assert_eq!(b2.data_f64(), b.data_f64());
}
