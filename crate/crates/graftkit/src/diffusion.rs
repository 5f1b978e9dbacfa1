//! Forward corruption, the denoising training objective, DDPM/DDIM
//! samplers with classifier-free guidance, and the synthetic blob dataset
//! that stands in for real image data at desk scale.

use crate::error::{Error, Result};
use crate::model::ModelGraph;
use crate::optim::{reduce_shard_grads, AdamW, OptimConfig};
use crate::par::par_map_indexed;
use crate::params::Binding;
use crate::rng::Rng;
use crate::tensor::{Buf, DType, Tensor};
use serde::{Deserialize, Serialize};

/// Batch items per data-parallel shard. Fixed structurally so results do
/// not depend on how many threads execute the shards.
pub const SHARD_SIZE: usize = 16;

// ---------------------------------------------------------------------------
// Noise schedule
// ---------------------------------------------------------------------------

/// Variance-preserving schedule: z_t = alpha(t) z + sigma(t) eps with
/// alpha^2 + sigma^2 = 1.
#[derive(Debug, Clone)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    /// Linear betas from 1e-4 to 0.02 over `num_steps` (default 1000).
    pub fn linear(num_steps: usize) -> NoiseSchedule {
        let betas: Vec<f64> = (0..num_steps)
            .map(|t| {
                if num_steps == 1 {
                    1e-4
                } else {
                    1e-4 + (0.02 - 1e-4) * t as f64 / (num_steps - 1) as f64
                }
            })
            .collect();
        NoiseSchedule::from_betas(betas)
    }

    pub fn from_betas(betas: Vec<f64>) -> NoiseSchedule {
        let mut alpha_bar = Vec::with_capacity(betas.len());
        let mut acc = 1.0;
        for &b in &betas {
            acc *= 1.0 - b;
            alpha_bar.push(acc);
        }
        NoiseSchedule { betas, alpha_bar }
    }

    pub fn num_steps(&self) -> usize {
        self.betas.len()
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    /// Signal coefficient sqrt(alpha_bar).
    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha_bar[t].sqrt()
    }

    /// Noise coefficient sqrt(1 - alpha_bar).
    pub fn sigma(&self, t: usize) -> f64 {
        (1.0 - self.alpha_bar[t]).sqrt()
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t >= self.num_steps() {
            return Err(Error::InvalidArgument(format!(
                "timestep {t} out of range 0..{}",
                self.num_steps()
            )));
        }
        Ok(())
    }
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        NoiseSchedule::linear(1000)
    }
}

/// Anything that predicts noise from (z_t, t, c). The model graph is the
/// real implementation; tests substitute closed-form stubs.
pub trait Denoiser {
    fn predict(&self, z_t: &Tensor, ts: &[usize], cs: &[usize]) -> Result<Tensor>;
    fn null_class(&self) -> usize;
    /// (channels, image side)
    fn image_dims(&self) -> (usize, usize);
    fn dtype(&self) -> DType;
}

impl Denoiser for ModelGraph {
    fn predict(&self, z_t: &Tensor, ts: &[usize], cs: &[usize]) -> Result<Tensor> {
        self.forward(&Binding::frozen(), z_t, ts, cs)
    }

    fn null_class(&self) -> usize {
        self.config().null_class()
    }

    fn image_dims(&self) -> (usize, usize) {
        (self.config().channels, self.config().image_size)
    }

    fn dtype(&self) -> DType {
        self.config().dtype
    }
}

/// z_t = alpha(t) * z + sigma(t) * eps, elementwise.
pub fn corrupt(s: &NoiseSchedule, z: &Tensor, t: usize, eps: &Tensor) -> Result<Tensor> {
    s.check_t(t)?;
    if z.shape() != eps.shape() {
        return Err(Error::ShapeMismatch {
            op: "corrupt",
            lhs: z.shape().to_vec(),
            rhs: eps.shape().to_vec(),
        });
    }
    z.scale(s.alpha(t))?.add(&eps.scale(s.sigma(t))?)
}

// ---------------------------------------------------------------------------
// Synthetic dataset
// ---------------------------------------------------------------------------

pub const BLOB_CLASSES: usize = 8;
pub const BLOB_SIDE: usize = 16;
const BLOB_RADIUS: f64 = 5.0;
const BLOB_STD: f64 = 1.5;
const BLOB_NOISE_STD: f64 = 0.05;

/// Gaussian-bump images, one bump location per class, laid out on a ring.
#[derive(Debug, Clone)]
pub struct BlobDataset {
    images: Vec<f32>,
    labels: Vec<usize>,
    seed: u64,
}

/// Integer (row, col) center of class `k`.
pub fn blob_center(k: usize) -> (usize, usize) {
    let theta = 2.0 * std::f64::consts::PI * k as f64 / BLOB_CLASSES as f64;
    let r = (8.0 + BLOB_RADIUS * theta.cos()).round();
    let c = (8.0 + BLOB_RADIUS * theta.sin()).round();
    (r as usize, c as usize)
}

/// The clean class template before per-sample noise.
pub fn blob_template(k: usize) -> Vec<f32> {
    let (cr, cc) = blob_center(k);
    let mut img = vec![0.0f32; BLOB_SIDE * BLOB_SIDE];
    for r in 0..BLOB_SIDE {
        for c in 0..BLOB_SIDE {
            let dr = r as f64 - cr as f64;
            let dc = c as f64 - cc as f64;
            img[r * BLOB_SIDE + c] =
                (-(dr * dr + dc * dc) / (2.0 * BLOB_STD * BLOB_STD)).exp() as f32;
        }
    }
    img
}

impl BlobDataset {
    /// Deterministic generation: (seed, size) fixes every byte.
    pub fn generate(seed: u64, size: usize) -> BlobDataset {
        let mut rng = Rng::new(seed ^ 0x626C_6F62);
        let px = BLOB_SIDE * BLOB_SIDE;
        let mut images = Vec::with_capacity(size * px);
        let mut labels = Vec::with_capacity(size);
        for _ in 0..size {
            let k = rng.below(BLOB_CLASSES);
            labels.push(k);
            let base = blob_template(k);
            for v in base {
                images.push(v + (rng.normal() * BLOB_NOISE_STD) as f32);
            }
        }
        BlobDataset { images, labels, seed }
    }

    pub fn from_parts(images: Vec<f32>, labels: Vec<usize>, seed: u64) -> Result<BlobDataset> {
        if images.len() != labels.len() * BLOB_SIDE * BLOB_SIDE {
            return Err(Error::InvalidArgument(format!(
                "dataset has {} pixels for {} labels",
                images.len(),
                labels.len()
            )));
        }
        Ok(BlobDataset { images, labels, seed })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn pixels(&self) -> &[f32] {
        &self.images
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn image_f64(&self, i: usize) -> Vec<f64> {
        let px = BLOB_SIDE * BLOB_SIDE;
        self.images[i * px..(i + 1) * px]
            .iter()
            .map(|&v| v as f64)
            .collect()
    }

    /// Stack items `idx` into a `[B, 1, 16, 16]` tensor.
    pub fn batch(&self, idx: &[usize], dtype: DType) -> Tensor {
        let px = BLOB_SIDE * BLOB_SIDE;
        let mut data = Vec::with_capacity(idx.len() * px);
        for &i in idx {
            data.extend(self.images[i * px..(i + 1) * px].iter().map(|&v| v as f64));
        }
        Tensor::from_f64_as(&[idx.len(), 1, BLOB_SIDE, BLOB_SIDE], &data, dtype).unwrap()
    }

    /// Deterministic subset: seeded shuffle, keep the first
    /// floor(fraction * n) items.
    pub fn subset(&self, fraction: f64, seed: u64) -> Result<BlobDataset> {
        if !(0.0..=1.0).contains(&fraction) || fraction == 0.0 {
            return Err(Error::InvalidArgument(format!(
                "fraction {fraction} outside (0, 1]"
            )));
        }
        let keep = ((fraction * self.len() as f64).floor() as usize).max(1);
        let mut order: Vec<usize> = (0..self.len()).collect();
        let mut rng = Rng::new(seed ^ 0x7375_6273);
        rng.shuffle(&mut order);
        order.truncate(keep);
        let px = BLOB_SIDE * BLOB_SIDE;
        let mut images = Vec::with_capacity(keep * px);
        let mut labels = Vec::with_capacity(keep);
        for &i in &order {
            images.extend_from_slice(&self.images[i * px..(i + 1) * px]);
            labels.push(self.labels[i]);
        }
        Ok(BlobDataset { images, labels, seed: self.seed })
    }
}

// ---------------------------------------------------------------------------
// Training objective
// ---------------------------------------------------------------------------

/// One sample's randomness, drawn up front so sharding cannot reorder it.
#[derive(Debug, Clone)]
pub struct NoiseDraw {
    pub t: usize,
    pub label: usize,
    pub eps: Vec<f64>,
}

pub fn draw_noise(
    s: &NoiseSchedule,
    labels: &[usize],
    null_class: usize,
    cfg_dropout: f64,
    pixels: usize,
    rng: &mut Rng,
) -> Vec<NoiseDraw> {
    labels
        .iter()
        .map(|&lab| {
            let t = rng.below(s.num_steps());
            let dropped = rng.uniform() < cfg_dropout;
            let eps = rng.normal_vec(pixels, 1.0);
            NoiseDraw {
                t,
                label: if dropped { null_class } else { lab },
                eps,
            }
        })
        .collect()
}

/// Loss graph for a batch slice under a given binding:
/// sum over items of mean-squared error, as a scalar tensor. Divide by the
/// full batch size to get the mean loss.
pub fn dm_loss_graph(
    model: &ModelGraph,
    bind: &Binding,
    s: &NoiseSchedule,
    images: &Tensor,
    draws: &[NoiseDraw],
) -> Result<Tensor> {
    let b = images.shape()[0];
    if b == 0 || draws.len() != b {
        return Err(Error::InvalidArgument(format!(
            "dm_loss: {} draws for batch of {b}",
            draws.len()
        )));
    }
    let px: usize = images.shape()[1..].iter().product();
    let dtype = images.dtype();
    // Per-item scale factors enter as [B, 1, 1, 1] broadcasts.
    let alphas: Vec<f64> = draws.iter().map(|d| s.alpha(d.t)).collect();
    let sigmas: Vec<f64> = draws.iter().map(|d| s.sigma(d.t)).collect();
    let mut eps_data = Vec::with_capacity(b * px);
    for d in draws {
        s.check_t(d.t)?;
        if d.eps.len() != px {
            return Err(Error::InvalidArgument(
                "dm_loss: noise draw has wrong pixel count".into(),
            ));
        }
        eps_data.extend_from_slice(&d.eps);
    }
    let eps = Tensor::from_f64_as(images.shape(), &eps_data, dtype)?;
    let bshape = [b, 1, 1, 1];
    let alpha_t = Tensor::from_f64_as(&bshape, &alphas, dtype)?;
    let sigma_t = Tensor::from_f64_as(&bshape, &sigmas, dtype)?;
    let z_t = images.mul(&alpha_t)?.add(&eps.mul(&sigma_t)?)?;
    let ts: Vec<usize> = draws.iter().map(|d| d.t).collect();
    let cs: Vec<usize> = draws.iter().map(|d| d.label).collect();
    let pred = model.forward(bind, &z_t, &ts, &cs)?;
    let diff = eps.sub(&pred)?;
    diff.mul(&diff)?.sum_all()?.scale(1.0 / px as f64)
}

/// Mean denoising loss of a batch under freshly drawn noise; evaluation
/// only (no gradients). Label dropout is not applied.
pub fn dm_loss(
    model: &impl Denoiser,
    s: &NoiseSchedule,
    images: &Tensor,
    labels: &[usize],
    rng: &mut Rng,
) -> Result<f64> {
    let b = images.shape().first().copied().unwrap_or(0);
    if b == 0 {
        return Err(Error::InvalidArgument("dm_loss: empty batch".into()));
    }
    let px: usize = images.shape()[1..].iter().product();
    let draws = draw_noise(s, labels, model.null_class(), 0.0, px, rng);
    let loss = stub_loss_graph(model, s, images, &draws)?;
    Ok(loss.item() / b as f64)
}

/// Loss graph against any denoiser, without a parameter binding.
pub fn stub_loss_graph(
    model: &impl Denoiser,
    s: &NoiseSchedule,
    images: &Tensor,
    draws: &[NoiseDraw],
) -> Result<Tensor> {
    let b = images.shape()[0];
    if b == 0 || draws.len() != b {
        return Err(Error::InvalidArgument(format!(
            "dm_loss: {} draws for batch of {b}",
            draws.len()
        )));
    }
    let px: usize = images.shape()[1..].iter().product();
    let dtype = images.dtype();
    let alphas: Vec<f64> = draws.iter().map(|d| s.alpha(d.t)).collect();
    let sigmas: Vec<f64> = draws.iter().map(|d| s.sigma(d.t)).collect();
    let mut eps_data = Vec::with_capacity(b * px);
    for d in draws {
        s.check_t(d.t)?;
        eps_data.extend_from_slice(&d.eps);
    }
    let eps = Tensor::from_f64_as(images.shape(), &eps_data, dtype)?;
    let bshape = [b, 1, 1, 1];
    let alpha_t = Tensor::from_f64_as(&bshape, &alphas, dtype)?;
    let sigma_t = Tensor::from_f64_as(&bshape, &sigmas, dtype)?;
    let z_t = images.mul(&alpha_t)?.add(&eps.mul(&sigma_t)?)?;
    let ts: Vec<usize> = draws.iter().map(|d| d.t).collect();
    let cs: Vec<usize> = draws.iter().map(|d| d.label).collect();
    let pred = model.predict(&z_t, &ts, &cs)?;
    let diff = eps.sub(&pred)?;
    diff.mul(&diff)?.sum_all()?.scale(1.0 / px as f64)
}

/// Deterministic held-out loss probe: fixed draws from `seed`, no label
/// dropout. Comparable across models of the same shape.
pub fn eval_dm_loss(
    model: &ModelGraph,
    s: &NoiseSchedule,
    data: &BlobDataset,
    count: usize,
    seed: u64,
) -> Result<f64> {
    let count = count.min(data.len());
    if count == 0 {
        return Err(Error::InvalidArgument("eval_dm_loss: empty probe".into()));
    }
    let idx: Vec<usize> = (0..count).collect();
    let px = BLOB_SIDE * BLOB_SIDE;
    let mut rng = Rng::new(seed ^ 0x6576_616C);
    let labels: Vec<usize> = idx.iter().map(|&i| data.label(i)).collect();
    let draws = draw_noise(s, &labels, model.config().null_class(), 0.0, px, &mut rng);
    let shards: Vec<Vec<usize>> = idx.chunks(SHARD_SIZE).map(|c| c.to_vec()).collect();
    let losses = par_map_indexed(shards.len(), None, |si| {
        let shard = &shards[si];
        let images = data.batch(shard, model.dtype());
        let sd: Vec<NoiseDraw> = shard.iter().map(|&i| draws[i].clone()).collect();
        dm_loss_graph(model, &Binding::frozen(), s, &images, &sd).map(|t| t.item())
    });
    let mut total = 0.0;
    for l in losses {
        total += l?;
    }
    Ok(total / count as f64)
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    pub lr: f64,
    #[serde(default = "default_warmup")]
    pub warmup: usize,
    #[serde(default)]
    pub halve_every: Option<usize>,
    #[serde(default)]
    pub weight_decay: f64,
    #[serde(default)]
    pub clip_norm: Option<f64>,
    #[serde(default)]
    pub seed: u64,
    /// Print a progress line to stderr every this many steps.
    #[serde(default)]
    pub log_every: Option<usize>,
}

fn default_batch() -> usize {
    128
}
fn default_warmup() -> usize {
    200
}

impl TrainConfig {
    /// Reference teacher run: 4k steps, batch 128, lr 1e-4, 200-step warmup.
    pub fn teacher(seed: u64) -> TrainConfig {
        TrainConfig {
            steps: 4000,
            batch_size: 128,
            lr: 1e-4,
            warmup: 200,
            halve_every: None,
            weight_decay: 0.0,
            clip_norm: None,
            seed,
            log_every: None,
        }
    }
}

/// Indices of parameters allowed to train; `None` trains everything.
pub type TrainMask = Option<Vec<bool>>;

/// Train in place with the denoising objective. Returns the per-step loss
/// trace. Deterministic for a fixed seed, independent of thread count.
pub fn train(
    model: &mut ModelGraph,
    s: &NoiseSchedule,
    data: &BlobDataset,
    cfg: &TrainConfig,
    mask: &TrainMask,
) -> Result<Vec<f64>> {
    if data.is_empty() {
        return Err(Error::InvalidArgument("train: empty dataset".into()));
    }
    let px = BLOB_SIDE * BLOB_SIDE;
    let null_class = model.config().null_class();
    let cfg_dropout = model.config().cfg_dropout;
    let mut opt = AdamW::new(
        model,
        OptimConfig {
            weight_decay: cfg.weight_decay,
            clip_norm: cfg.clip_norm,
            warmup: cfg.warmup,
            ..OptimConfig::adamw(cfg.lr)
        },
    );
    let mut rng = Rng::new(cfg.seed ^ 0x7472_6169_6E21);
    let mut trace = Vec::with_capacity(cfg.steps);

    for step in 0..cfg.steps {
        let idx: Vec<usize> = (0..cfg.batch_size).map(|_| rng.below(data.len())).collect();
        let labels: Vec<usize> = idx.iter().map(|&i| data.label(i)).collect();
        let draws = draw_noise(s, &labels, null_class, cfg_dropout, px, &mut rng);
        let shards: Vec<Vec<usize>> = (0..idx.len())
            .collect::<Vec<_>>()
            .chunks(SHARD_SIZE)
            .map(|c| c.to_vec())
            .collect();

        let results = par_map_indexed(shards.len(), None, |si| -> Result<(f64, Vec<Option<Buf>>)> {
            let rows = &shards[si];
            let items: Vec<usize> = rows.iter().map(|&r| idx[r]).collect();
            let images = data.batch(&items, model.dtype());
            let sd: Vec<NoiseDraw> = rows.iter().map(|&r| draws[r].clone()).collect();
            let bind = Binding::trainable(&*model);
            let loss = dm_loss_graph(model, &bind, s, &images, &sd)?;
            loss.backward()?;
            Ok((loss.item(), bind.grads(&*model)))
        });

        let mut loss_sum = 0.0;
        let mut shard_grads = Vec::with_capacity(results.len());
        for r in results {
            match r {
                Ok((l, g)) => {
                    loss_sum += l;
                    shard_grads.push(g);
                }
                Err(Error::NonFinite { .. }) => {
                    return Err(Error::Diverged { step, trace });
                }
                Err(e) => return Err(e),
            }
        }
        let mean_loss = loss_sum / cfg.batch_size as f64;
        if !mean_loss.is_finite() {
            return Err(Error::Diverged { step, trace });
        }
        let mut grads = reduce_shard_grads(&shard_grads, 1.0 / cfg.batch_size as f64);
        if let Some(mask) = mask {
            for (g, &keep) in grads.iter_mut().zip(mask) {
                if !keep {
                    *g = None;
                }
            }
        }
        opt.step(model, &grads)?;
        trace.push(mean_loss);
        if let Some(every) = cfg.log_every {
            if every > 0 && (step + 1) % every == 0 {
                let lo = trace.len().saturating_sub(100);
                let window = &trace[lo..];
                let avg = window.iter().sum::<f64>() / window.len() as f64;
                eprintln!(
                    "step {:>5}/{} | loss {mean_loss:.4} | window {avg:.4}",
                    step + 1,
                    cfg.steps
                );
            }
        }
    }
    Ok(trace)
}

// ---------------------------------------------------------------------------
// Sampling
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SampleMethod {
    Ddpm,
    Ddim,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SampleConfig {
    pub method: SampleMethod,
    pub steps: usize,
    pub cfg_scale: f64,
    pub seed: u64,
}

impl SampleConfig {
    /// The evaluation protocol used throughout: 50-step DDIM at cfg 1.5.
    pub fn ddim50(seed: u64) -> SampleConfig {
        SampleConfig {
            method: SampleMethod::Ddim,
            steps: 50,
            cfg_scale: 1.5,
            seed,
        }
    }
}

fn timestep_ladder(num_steps: usize, steps: usize) -> Vec<usize> {
    // Evenly spaced, descending, always ending at t = 0.
    let mut ts: Vec<usize> = (0..steps)
        .map(|i| {
            if steps == 1 {
                0
            } else {
                ((num_steps - 1) as f64 * i as f64 / (steps - 1) as f64).round() as usize
            }
        })
        .collect();
    ts.dedup();
    ts.reverse();
    ts
}

/// Guided noise estimate. At scale exactly one the unconditional branch
/// cancels algebraically, so only the conditional pass runs.
fn guided_eps(
    model: &impl Denoiser,
    z: &Tensor,
    t: usize,
    class: usize,
    cfg_scale: f64,
) -> Result<Tensor> {
    let b = z.shape()[0];
    let ts = vec![t; b];
    let cond = model.predict(z, &ts, &vec![class; b])?;
    if cfg_scale == 1.0 {
        return Ok(cond);
    }
    let null = model.predict(z, &ts, &vec![model.null_class(); b])?;
    // eps_null + scale * (eps_cond - eps_null)
    null.add(&cond.sub(&null)?.scale(cfg_scale)?)
}

pub fn sample(
    model: &impl Denoiser,
    s: &NoiseSchedule,
    cfg: &SampleConfig,
    class: usize,
    count: usize,
) -> Result<Tensor> {
    let (chan, side) = model.image_dims();
    let shape = [count, chan, side, side];
    let mut rng = Rng::new(cfg.seed ^ 0x7361_6D70_6C65);
    let z = Tensor::randn(&shape, 1.0, &mut rng, model.dtype());
    sample_from(model, s, cfg, class, &z, &mut rng)
}

/// Run the reverse process from a given starting state. `rng` supplies
/// DDPM posterior noise; DDIM draws nothing.
pub fn sample_from(
    model: &impl Denoiser,
    s: &NoiseSchedule,
    cfg: &SampleConfig,
    class: usize,
    z_init: &Tensor,
    rng: &mut Rng,
) -> Result<Tensor> {
    if cfg.steps == 0 || cfg.steps > s.num_steps() {
        return Err(Error::InvalidArgument(format!(
            "sample: steps {} outside 1..={}",
            cfg.steps,
            s.num_steps()
        )));
    }
    if cfg.cfg_scale < 0.0 {
        return Err(Error::InvalidArgument("sample: negative cfg scale".into()));
    }
    if class > model.null_class() {
        return Err(Error::InvalidArgument(format!(
            "sample: class {class} out of range"
        )));
    }
    let shape = z_init.shape().to_vec();
    let mut z = z_init.detach();
    let ladder = timestep_ladder(s.num_steps(), cfg.steps);

    for (i, &t) in ladder.iter().enumerate() {
        let prev = ladder.get(i + 1).copied();
        let eps_hat = guided_eps(model, &z, t, class, cfg.cfg_scale)?;
        let (alpha_t, sigma_t) = (s.alpha(t), s.sigma(t));
        // Implied clean image for this step.
        let z0 = z.sub(&eps_hat.scale(sigma_t)?)?.scale(1.0 / alpha_t)?;
        z = match (cfg.method, prev) {
            (_, None) => z0,
            (SampleMethod::Ddim, Some(tp)) => {
                z0.scale(s.alpha(tp))?.add(&eps_hat.scale(s.sigma(tp))?)?
            }
            (SampleMethod::Ddpm, Some(tp)) => {
                let ab_t = s.alpha_bar(t);
                let ab_p = s.alpha_bar(tp);
                let alpha_eff = ab_t / ab_p;
                let beta_eff = 1.0 - alpha_eff;
                let mean = z0
                    .scale(ab_p.sqrt() * beta_eff / (1.0 - ab_t))?
                    .add(&z.scale(alpha_eff.sqrt() * (1.0 - ab_p) / (1.0 - ab_t))?)?;
                let var = beta_eff * (1.0 - ab_p) / (1.0 - ab_t);
                let xi = Tensor::randn(&shape, 1.0, rng, model.dtype());
                mean.add(&xi.scale(var.max(0.0).sqrt())?)?
            }
        };
    }
    // Clamp the decoded images to a sane pixel range.
    let clipped: Vec<f64> = z.data_f64().iter().map(|&v| v.clamp(-3.0, 3.0)).collect();
    Tensor::from_f64_as(&shape, &clipped, model.dtype())
}

// ---------------------------------------------------------------------------
// Proxy quality metric
// ---------------------------------------------------------------------------

/// Fraction of images whose brightest pixel lies within Chebyshev
/// distance 2 of the class center.
pub fn blob_accuracy(images: &Tensor, labels: &[usize]) -> Result<f64> {
    let s = images.shape();
    if s.len() != 4 || s[1] != 1 || s[2] != BLOB_SIDE || s[3] != BLOB_SIDE {
        return Err(Error::InvalidShape {
            op: "blob_accuracy",
            shape: s.to_vec(),
            reason: format!("expected [n, 1, {BLOB_SIDE}, {BLOB_SIDE}]"),
        });
    }
    if s[0] != labels.len() || labels.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "blob_accuracy: {} images vs {} labels",
            s[0],
            labels.len()
        )));
    }
    let data = images.data_f64();
    let px = BLOB_SIDE * BLOB_SIDE;
    let mut hits = 0usize;
    for (i, &lab) in labels.iter().enumerate() {
        let img = &data[i * px..(i + 1) * px];
        let mut best = 0usize;
        for (j, &v) in img.iter().enumerate() {
            if v > img[best] {
                best = j;
            }
        }
        let (r, c) = (best / BLOB_SIDE, best % BLOB_SIDE);
        let (cr, cc) = blob_center(lab);
        if r.abs_diff(cr) <= 2 && c.abs_diff(cc) <= 2 {
            hits += 1;
        }
    }
    Ok(hits as f64 / labels.len() as f64)
}
