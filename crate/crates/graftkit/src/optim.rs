//! AdamW with global-norm gradient clipping and a warmup/halving schedule.
//!
//! Moment buffers and the update arithmetic run in f64 regardless of the
//! parameter dtype; updates are cast back on write. One less source of
//! drift between runs that only differ in execution interleaving.

use crate::error::{Error, Result};
use crate::params::Module;
use crate::tensor::Buf;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OptimConfig {
    pub lr: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
    #[serde(default)]
    pub weight_decay: f64,
    #[serde(default)]
    pub clip_norm: Option<f64>,
    /// Steps of linear learning-rate warmup.
    #[serde(default)]
    pub warmup: usize,
    /// Halve the learning rate every this many steps, after warmup.
    #[serde(default)]
    pub halve_every: Option<usize>,
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}

impl OptimConfig {
    pub fn adamw(lr: f64) -> OptimConfig {
        OptimConfig {
            lr,
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
            weight_decay: 0.0,
            clip_norm: None,
            warmup: 0,
            halve_every: None,
        }
    }

    pub fn lr_at(&self, step: usize) -> f64 {
        let mut lr = self.lr;
        if self.warmup > 0 && step < self.warmup {
            lr *= (step + 1) as f64 / self.warmup as f64;
        } else if let Some(h) = self.halve_every {
            let past = step - self.warmup.min(step);
            lr *= 0.5f64.powi((past / h) as i32);
        }
        lr
    }
}

pub struct AdamW {
    cfg: OptimConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: usize,
}

impl AdamW {
    pub fn new(module: &impl Module, cfg: OptimConfig) -> AdamW {
        let mut sizes = Vec::new();
        module.visit_params(&mut |p| sizes.push(p.numel()));
        AdamW {
            cfg,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            step: 0,
        }
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    /// Apply one update. `grads` aligns with the module's parameter visit
    /// order; `None` entries are skipped (their moments still decay).
    pub fn step(&mut self, module: &mut impl Module, grads: &[Option<Vec<f64>>]) -> Result<()> {
        let mut count = 0;
        module.visit_params(&mut |_| count += 1);
        if grads.len() != count {
            return Err(Error::InvalidArgument(format!(
                "optimizer got {} gradients for {count} parameters",
                grads.len()
            )));
        }

        let clip_factor = match self.cfg.clip_norm {
            Some(c) => {
                let sq: f64 = grads
                    .iter()
                    .flatten()
                    .flat_map(|g| g.iter())
                    .map(|&x| x * x)
                    .sum();
                let norm = sq.sqrt();
                if norm > c {
                    c / norm
                } else {
                    1.0
                }
            }
            None => 1.0,
        };

        let lr = self.cfg.lr_at(self.step);
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.cfg.beta1.powi(t);
        let bc2 = 1.0 - self.cfg.beta2.powi(t);
        let (b1, b2, eps, wd) = (self.cfg.beta1, self.cfg.beta2, self.cfg.eps, self.cfg.weight_decay);

        let mut idx = 0;
        module.visit_params_mut(&mut |p| {
            let g = &grads[idx];
            if let Some(g) = g {
                let m = &mut self.m[idx];
                let v = &mut self.v[idx];
                p.update(|buf| match buf {
                    Buf::F32(w) => {
                        for i in 0..w.len() {
                            let gi = g[i] * clip_factor;
                            m[i] = b1 * m[i] + (1.0 - b1) * gi;
                            v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
                            let mh = m[i] / bc1;
                            let vh = v[i] / bc2;
                            let wi = w[i] as f64;
                            w[i] = (wi - lr * (mh / (vh.sqrt() + eps) + wd * wi)) as f32;
                        }
                    }
                    Buf::F64(w) => {
                        for i in 0..w.len() {
                            let gi = g[i] * clip_factor;
                            m[i] = b1 * m[i] + (1.0 - b1) * gi;
                            v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
                            let mh = m[i] / bc1;
                            let vh = v[i] / bc2;
                            w[i] -= lr * (mh / (vh.sqrt() + eps) + wd * w[i]);
                        }
                    }
                });
            }
            idx += 1;
        });
        Ok(())
    }
}

/// Sum per-shard gradients (visit order) into f64 accumulators, in shard
/// order, then scale. Returns one gradient per parameter.
pub fn reduce_shard_grads(
    shards: &[Vec<Option<Buf>>],
    scale: f64,
) -> Vec<Option<Vec<f64>>> {
    let nparams = shards.first().map(|s| s.len()).unwrap_or(0);
    let mut out: Vec<Option<Vec<f64>>> = vec![None; nparams];
    for shard in shards {
        for (slot, g) in out.iter_mut().zip(shard) {
            if let Some(g) = g {
                let acc = slot.get_or_insert_with(|| vec![0.0; g.len()]);
                match g {
                    Buf::F32(v) => {
                        for (a, &x) in acc.iter_mut().zip(v) {
                            *a += x as f64;
                        }
                    }
                    Buf::F64(v) => {
                        for (a, &x) in acc.iter_mut().zip(v) {
                            *a += x;
                        }
                    }
                }
            }
        }
    }
    for slot in out.iter_mut().flatten() {
        for x in slot.iter_mut() {
            *x *= scale;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::Param;
    use crate::tensor::{DType, Tensor};

    struct One {
        p: Param,
    }

    impl Module for One {
        fn visit_params(&self, f: &mut dyn FnMut(&Param)) {
            f(&self.p);
        }
        fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
            f(&mut self.p);
        }
    }

    #[test]
    fn adamw_descends_a_quadratic() {
        // minimize (w - 3)^2
        let mut m = One {
            p: Param::new("w", &Tensor::from_f64(&[1], vec![0.0]).unwrap()),
        };
        let mut opt = AdamW::new(&m, OptimConfig::adamw(0.1));
        for _ in 0..200 {
            let w = m.p.value().get(0);
            let g = 2.0 * (w - 3.0);
            opt.step(&mut m, &[Some(vec![g])]).unwrap();
        }
        assert!((m.p.value().get(0) - 3.0).abs() < 0.05);
    }

    #[test]
    fn warmup_then_halving() {
        let cfg = OptimConfig {
            warmup: 10,
            halve_every: Some(100),
            ..OptimConfig::adamw(1.0)
        };
        assert!((cfg.lr_at(0) - 0.1).abs() < 1e-12);
        assert!((cfg.lr_at(9) - 1.0).abs() < 1e-12);
        assert!((cfg.lr_at(50) - 1.0).abs() < 1e-12);
        assert!((cfg.lr_at(110) - 0.5).abs() < 1e-12);
        assert!((cfg.lr_at(210) - 0.25).abs() < 1e-12);
    }

    #[test]
    fn clip_bounds_the_step() {
        let mut m = One {
            p: Param::new("w", &Tensor::from_f64(&[2], vec![0.0, 0.0]).unwrap()),
        };
        let cfg = OptimConfig {
            clip_norm: Some(1.0),
            ..OptimConfig::adamw(1.0)
        };
        let mut opt = AdamW::new(&m, cfg);
        opt.step(&mut m, &[Some(vec![300.0, 400.0])]).unwrap();
        // Clipped direction preserved: 3-4-5 triangle.
        let w = m.p.value().to_f64_vec();
        assert!((w[0] / w[1] - 0.75).abs() < 1e-9);
    }

    #[test]
    fn shard_reduction_is_ordered_sum() {
        let shards = vec![
            vec![Some(Buf::F32(vec![1.0, 2.0])), None],
            vec![Some(Buf::F32(vec![3.0, 4.0])), None],
        ];
        let total = reduce_shard_grads(&shards, 0.5);
        assert_eq!(total[0].as_ref().unwrap(), &vec![2.0, 3.0]);
        assert!(total[1].is_none());
    }
}
