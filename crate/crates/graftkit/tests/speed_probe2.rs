use graftkit::diffusion::{dm_loss_graph, draw_noise, BlobDataset, NoiseSchedule};
use graftkit::model::{build_model, DiTConfig};
use graftkit::params::Binding;
use graftkit::rng::Rng;
use std::time::Instant;

#[test]
fn shard_breakdown() {
    let model = build_model(&DiTConfig::xs(0)).unwrap();
    let s = NoiseSchedule::default();
    let data = BlobDataset::generate(0, 256);
    let mut rng = Rng::new(1);
    let idx: Vec<usize> = (0..16).collect();
    let labels: Vec<usize> = idx.iter().map(|&i| data.label(i)).collect();
    let draws = draw_noise(&s, &labels, 8, 0.1, 256, &mut rng);
    let images = data.batch(&idx, graftkit::DType::F32);

    // Frozen forward only
    let t0 = Instant::now();
    for _ in 0..10 {
        let l = dm_loss_graph(&model, &Binding::frozen(), &s, &images, &draws).unwrap();
        std::hint::black_box(l.item());
    }
    println!("frozen fwd: {:.1} ms", t0.elapsed().as_secs_f64() * 100.0);

    // Tracked forward only
    let t0 = Instant::now();
    for _ in 0..10 {
        let bind = Binding::trainable(&model);
        let l = dm_loss_graph(&model, &bind, &s, &images, &draws).unwrap();
        std::hint::black_box(l.item());
    }
    println!("tracked fwd: {:.1} ms", t0.elapsed().as_secs_f64() * 100.0);

    // Forward + backward
    let t0 = Instant::now();
    for _ in 0..10 {
        let bind = Binding::trainable(&model);
        let l = dm_loss_graph(&model, &bind, &s, &images, &draws).unwrap();
        l.backward().unwrap();
        std::hint::black_box(bind.grads(&model).len());
    }
    println!("fwd+bwd: {:.1} ms  (x8 shards = full batch)", t0.elapsed().as_secs_f64() * 100.0);
}
