//! Data-parallel inner loops, sequential vs rayon.
//!
//! The two hot maps are batch-shard training steps and per-layer
//! distillation. Both go through `par::par_map_indexed`, so the comparison
//! here pins the degree explicitly: 1 worker against the pool default.
//! Results are identical either way; only the wall clock moves.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use graftkit::diffusion::{
    dm_loss_graph, draw_noise, BlobDataset, NoiseDraw, NoiseSchedule, SHARD_SIZE,
};
use graftkit::graft::{
    capture_activations, distill_many, DistillConfig, DistillJob, RegressionObjective,
};
use graftkit::model::{build_model, CaptureTarget, DiTConfig, Slot};
use graftkit::operators::TokenMixer;
use graftkit::par::par_map_indexed;
use graftkit::params::Binding;
use graftkit::rng::Rng;
use graftkit::tensor::Buf;
use graftkit::DType;

fn bench_cfg() -> DiTConfig {
    DiTConfig {
        depth: 4,
        dim: 32,
        heads: 4,
        patch: 2,
        ..DiTConfig::xs(0)
    }
}

/// One full forward+backward over the batch, sharded like the trainer.
fn train_shards(
    model: &graftkit::model::ModelGraph,
    s: &NoiseSchedule,
    data: &BlobDataset,
    draws: &[NoiseDraw],
    idx: &[usize],
    degree: Option<usize>,
) -> f64 {
    let shards: Vec<Vec<usize>> = (0..idx.len())
        .collect::<Vec<_>>()
        .chunks(SHARD_SIZE)
        .map(|c| c.to_vec())
        .collect();
    let results = par_map_indexed(shards.len(), degree, |si| {
        let rows = &shards[si];
        let items: Vec<usize> = rows.iter().map(|&r| idx[r]).collect();
        let images = data.batch(&items, model.dtype());
        let sd: Vec<NoiseDraw> = rows.iter().map(|&r| draws[r].clone()).collect();
        let bind = Binding::trainable(model);
        let loss = dm_loss_graph(model, &bind, s, &images, &sd).unwrap();
        loss.backward().unwrap();
        let grads: Vec<Option<Buf>> = bind.grads(model);
        (loss.item(), grads)
    });
    results.iter().map(|(l, _)| l).sum()
}

fn bench_train_step(c: &mut Criterion) {
    let cfg = bench_cfg();
    let model = build_model(&cfg).unwrap();
    let s = NoiseSchedule::default();
    let data = BlobDataset::generate(1, 256);
    let mut rng = Rng::new(2);
    let batch = 64;
    let idx: Vec<usize> = (0..batch).map(|_| rng.below(data.len())).collect();
    let labels: Vec<usize> = idx.iter().map(|&i| data.label(i)).collect();
    let draws = draw_noise(&s, &labels, cfg.null_class(), 0.1, 256, &mut rng);

    let mut group = c.benchmark_group("train_step_batch64");
    for (name, degree) in [("seq", Some(1)), ("par", None)] {
        group.bench_with_input(BenchmarkId::from_parameter(name), &degree, |b, &degree| {
            b.iter(|| train_shards(&model, &s, &data, &draws, &idx, degree));
        });
    }
    group.finish();
}

fn bench_distill_layers(c: &mut Criterion) {
    let cfg = bench_cfg();
    let teacher = build_model(&cfg).unwrap();
    let data = BlobDataset::generate(3, 128);
    let s = NoiseSchedule::default();
    let make_jobs = || -> Vec<DistillJob> {
        (0..2)
            .map(|layer| {
                let acts = capture_activations(
                    &teacher,
                    &data,
                    &s,
                    &CaptureTarget::Operator {
                        layer,
                        slot: Slot::Mha,
                        modulation_aware: false,
                    },
                    64,
                    layer as u64,
                )
                .unwrap();
                let fresh = teacher.entries[layer]
                    .as_block()
                    .unwrap()
                    .mixer
                    .config()
                    .reseeded(layer as u64 + 100);
                DistillJob {
                    mixer: TokenMixer::new(fresh, DType::F32).unwrap(),
                    acts,
                    objective: RegressionObjective::l1(),
                    cfg: DistillConfig {
                        epochs: 2,
                        batch_size: 32,
                        seed: layer as u64,
                        ..DistillConfig::default()
                    },
                }
            })
            .collect()
    };

    let mut group = c.benchmark_group("distill_two_layers");
    group.sample_size(10);
    for (name, degree) in [("seq", Some(1)), ("par", Some(2))] {
        group.bench_with_input(BenchmarkId::from_parameter(name), &degree, |b, &degree| {
            b.iter(|| {
                let out = distill_many(make_jobs(), degree);
                out.into_iter().map(|r| r.unwrap().1.train_trace[0]).sum::<f64>()
            });
        });
    }
    group.finish();
}

criterion_group!(benches, bench_train_step, bench_distill_layers);
criterion_main!(benches);
