use graftkit::diffusion::{train, BlobDataset, NoiseSchedule, TrainConfig};
use graftkit::model::{build_model, DiTConfig};
use std::time::Instant;

#[test]
fn teacher_step_time() {
    let mut model = build_model(&DiTConfig::xs(0)).unwrap();
    let s = NoiseSchedule::default();
    let data = BlobDataset::generate(0, 1024);
    let cfg = TrainConfig { steps: 20, ..TrainConfig::teacher(0) };
    let t0 = Instant::now();
    let trace = train(&mut model, &s, &data, &cfg, &None).unwrap();
    let dt = t0.elapsed().as_secs_f64();
    println!("20 steps in {dt:.2}s -> {:.0}ms/step; 4k steps ~ {:.1} min; first loss {:.3} last {:.3}",
        dt / 20.0 * 1000.0, dt / 20.0 * 4000.0 / 60.0, trace[0], trace[19]);
}
