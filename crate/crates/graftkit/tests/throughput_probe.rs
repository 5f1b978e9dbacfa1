use graftkit::tensor::Tensor;
use graftkit::{DType, Rng};
use std::time::Instant;

#[test]
fn throughput_probe() {
    let mut rng = Rng::new(1);
    // Typical training-shard shape: [B*N, D] x [D, D] at B=16, N=64, D=64.
    let a = Tensor::randn(&[1024, 64], 1.0, &mut rng, DType::F32);
    let b = Tensor::randn(&[64, 64], 1.0, &mut rng, DType::F32);
    let flops_per = 2.0 * 1024.0 * 64.0 * 64.0;
    let t0 = Instant::now();
    let iters = 2000;
    let mut acc = 0.0;
    for _ in 0..iters {
        let y = a.matmul(&b).unwrap();
        acc += y.buf().as_f32()[0] as f64;
    }
    let dt = t0.elapsed().as_secs_f64();
    println!("matmul f32 [1024,64]x[64,64]: {:.2} GFLOP/s (acc {acc})", flops_per * iters as f64 / dt / 1e9);

    // MLP-sized: [1024, 64] x [64, 256]
    let b2 = Tensor::randn(&[64, 256], 1.0, &mut rng, DType::F32);
    let t0 = Instant::now();
    let iters = 1000;
    for _ in 0..iters {
        let y = a.matmul(&b2).unwrap();
        std::hint::black_box(y.buf().as_f32()[0]);
    }
    let dt = t0.elapsed().as_secs_f64();
    println!("matmul f32 [1024,64]x[64,256]: {:.2} GFLOP/s", 2.0*1024.0*64.0*256.0 * iters as f64 / dt / 1e9);

    // Attention-sized bmm: [64, 64, 16] x [64, 16, 64]
    let q = Tensor::randn(&[64, 64, 16], 1.0, &mut rng, DType::F32);
    let k = Tensor::randn(&[64, 16, 64], 1.0, &mut rng, DType::F32);
    let t0 = Instant::now();
    let iters = 1000;
    for _ in 0..iters {
        let y = q.bmm(&k).unwrap();
        std::hint::black_box(y.buf().as_f32()[0]);
    }
    let dt = t0.elapsed().as_secs_f64();
    println!("bmm f32 [64,64,16]x[64,16,64]: {:.2} GFLOP/s", 2.0*64.0*64.0*16.0*64.0 * iters as f64 / dt / 1e9);

    // f64 for comparison
    let a64 = a.to_dtype(DType::F64);
    let b64 = b.to_dtype(DType::F64);
    let t0 = Instant::now();
    let iters = 1000;
    for _ in 0..iters {
        let y = a64.matmul(&b64).unwrap();
        std::hint::black_box(y.buf().as_f64()[0]);
    }
    let dt = t0.elapsed().as_secs_f64();
    println!("matmul f64 [1024,64]x[64,64]: {:.2} GFLOP/s", flops_per * iters as f64 / dt / 1e9);
}
