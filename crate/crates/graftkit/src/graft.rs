//! Two-stage operator grafting: per-slot activation regression against a
//! frozen teacher, then lightweight end-to-end finetuning of the edited
//! model. Also: replacement planning over layer-selection strategies, the
//! self-grafting control, pair-span distillation for the depth-to-width
//! rewiring, and an output-deviation probe.

use crate::diffusion::{train, BlobDataset, NoiseSchedule, TrainConfig, BLOB_SIDE};
use crate::error::{Error, Result};
use crate::model::{CaptureTarget, ModelGraph, ParallelPair, Slot};
use crate::operators::{OperatorConfig, TokenMixer};
use crate::optim::{AdamW, OptimConfig};
use crate::par::par_map_indexed;
use crate::params::{Binding, Module};
use crate::rng::Rng;
use crate::tensor::{DType, Tensor};
use serde::{Deserialize, Serialize};

// ---------------------------------------------------------------------------
// Plans
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Full,
    Interleaved,
    TopLocal,
    LowLocal,
    Deep,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GraftTarget {
    pub layer: usize,
    pub slot: Slot,
    pub replacement: OperatorConfig,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GraftPlan {
    pub strategy: Strategy,
    pub ratio: f64,
    pub depth: usize,
    pub targets: Vec<GraftTarget>,
}

impl GraftPlan {
    pub fn layers(&self) -> Vec<usize> {
        self.targets.iter().map(|t| t.layer).collect()
    }
}

fn mix_seed(base: u64, layer: usize) -> u64 {
    let mut s = base ^ 0x706C_616E ^ (layer as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    s ^= s >> 33;
    s = s.wrapping_mul(0xFF51_AFD7_ED55_8CCD);
    s ^ (s >> 33)
}

/// Pure function from its arguments to a replacement plan.
///
/// Layer selection: FULL takes everything; INTERLEAVED at 50% takes odd
/// indices and at 75% keeps every fourth layer (the first layer stays
/// untouched in both); TOP/LOW_LOCAL rank layers by locality score; DEEP
/// takes the last layers.
pub fn make_plan(
    strategy: Strategy,
    ratio: f64,
    depth: usize,
    slot: Slot,
    replacement: &OperatorConfig,
    locality: Option<&[f64]>,
) -> Result<GraftPlan> {
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(Error::InvalidPlan(format!("ratio {ratio} outside (0, 1]")));
    }
    if depth == 0 {
        return Err(Error::InvalidPlan("depth must be positive".into()));
    }
    let count = (ratio * depth as f64).round() as usize;
    if count == 0 {
        return Err(Error::InvalidPlan(format!(
            "ratio {ratio} selects no layers at depth {depth}"
        )));
    }
    let layers: Vec<usize> = match strategy {
        Strategy::Full => {
            if (ratio - 1.0).abs() > 1e-12 {
                return Err(Error::InvalidPlan("full strategy requires ratio 1.0".into()));
            }
            (0..depth).collect()
        }
        Strategy::Interleaved => {
            if (ratio - 0.5).abs() < 1e-12 {
                (0..depth).filter(|i| i % 2 == 1).collect()
            } else if (ratio - 0.75).abs() < 1e-12 {
                (0..depth).filter(|i| i % 4 != 0).collect()
            } else if (ratio - 1.0).abs() < 1e-12 {
                (0..depth).collect()
            } else {
                return Err(Error::InvalidPlan(format!(
                    "interleaved strategy defines ratios 0.5, 0.75 and 1.0, got {ratio}"
                )));
            }
        }
        Strategy::TopLocal | Strategy::LowLocal => {
            let scores = locality.ok_or_else(|| {
                Error::InvalidPlan("locality strategies need a locality report".into())
            })?;
            if scores.len() != depth {
                return Err(Error::InvalidPlan(format!(
                    "locality report covers {} layers, model has {depth}",
                    scores.len()
                )));
            }
            let mut order: Vec<usize> = (0..depth).collect();
            // Ties break toward the lower layer index.
            match strategy {
                Strategy::TopLocal => order.sort_by(|&a, &b| {
                    scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b))
                }),
                _ => order.sort_by(|&a, &b| {
                    scores[a].partial_cmp(&scores[b]).unwrap().then(a.cmp(&b))
                }),
            }
            let mut chosen: Vec<usize> = order.into_iter().take(count).collect();
            chosen.sort_unstable();
            chosen
        }
        Strategy::Deep => (depth - count..depth).collect(),
    };
    if layers.len() != count {
        return Err(Error::InvalidPlan(format!(
            "strategy {strategy:?} selected {} layers, expected {count}",
            layers.len()
        )));
    }
    let targets = layers
        .into_iter()
        .map(|layer| GraftTarget {
            layer,
            slot,
            replacement: replacement.reseeded(mix_seed(replacement.seed, layer)),
        })
        .collect();
    Ok(GraftPlan {
        strategy,
        ratio,
        depth,
        targets,
    })
}

// ---------------------------------------------------------------------------
// Regression objectives
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectiveKind {
    L1,
    L2,
    Huber,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct RegressionObjective {
    pub kind: ObjectiveKind,
    #[serde(default = "default_delta")]
    pub delta: f64,
}

fn default_delta() -> f64 {
    1.0
}

impl RegressionObjective {
    pub fn l1() -> Self {
        RegressionObjective { kind: ObjectiveKind::L1, delta: default_delta() }
    }

    pub fn l2() -> Self {
        RegressionObjective { kind: ObjectiveKind::L2, delta: default_delta() }
    }

    pub fn huber(delta: f64) -> Self {
        RegressionObjective { kind: ObjectiveKind::Huber, delta }
    }

    /// Mean penalty of the residual `pred - target`, as a loss graph.
    pub fn loss(&self, pred: &Tensor, target: &Tensor) -> Result<Tensor> {
        let r = pred.sub(target)?;
        match self.kind {
            ObjectiveKind::L2 => r.mul(&r)?.mean_all(),
            ObjectiveKind::L1 => r.abs_elem()?.mean_all(),
            ObjectiveKind::Huber => r.huber_elem(self.delta)?.mean_all(),
        }
    }
}

// ---------------------------------------------------------------------------
// Activation capture
// ---------------------------------------------------------------------------

/// Which computation a dataset was captured from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CaptureSlot {
    Mha,
    Mlp,
    /// A span of two consecutive blocks; `layer` indexes the pair.
    PairSpan,
}

impl From<Slot> for CaptureSlot {
    fn from(s: Slot) -> CaptureSlot {
        match s {
            Slot::Mha => CaptureSlot::Mha,
            Slot::Mlp => CaptureSlot::Mlp,
        }
    }
}

/// Per-operator regression data: what the teacher's slot consumed and what
/// it produced, over diffusion-corrupted inputs.
#[derive(Clone)]
pub struct ActivationDataset {
    pub layer: usize,
    pub slot: CaptureSlot,
    pub modulation_aware: bool,
    pub teacher_fingerprint: String,
    pub seq_len: usize,
    pub width: usize,
    inputs: Vec<f32>,
    targets: Vec<f32>,
    ts: Vec<usize>,
    cs: Vec<usize>,
}

impl ActivationDataset {
    #[allow(clippy::too_many_arguments)]
    pub fn from_parts(
        layer: usize,
        slot: CaptureSlot,
        modulation_aware: bool,
        teacher_fingerprint: String,
        seq_len: usize,
        width: usize,
        inputs: Vec<f32>,
        targets: Vec<f32>,
        ts: Vec<usize>,
        cs: Vec<usize>,
    ) -> Result<ActivationDataset> {
        let rec = seq_len * width;
        if ts.len() != cs.len()
            || inputs.len() != ts.len() * rec
            || targets.len() != inputs.len()
        {
            return Err(Error::InvalidArgument(
                "activation dataset fields disagree on record count".into(),
            ));
        }
        Ok(ActivationDataset {
            layer,
            slot,
            modulation_aware,
            teacher_fingerprint,
            seq_len,
            width,
            inputs,
            targets,
            ts,
            cs,
        })
    }

    pub fn len(&self) -> usize {
        self.ts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ts.is_empty()
    }

    pub fn record_t(&self, i: usize) -> usize {
        self.ts[i]
    }

    pub fn record_c(&self, i: usize) -> usize {
        self.cs[i]
    }

    pub fn inputs_raw(&self) -> &[f32] {
        &self.inputs
    }

    pub fn targets_raw(&self) -> &[f32] {
        &self.targets
    }

    pub fn ts_raw(&self) -> &[usize] {
        &self.ts
    }

    pub fn cs_raw(&self) -> &[usize] {
        &self.cs
    }

    /// Stack records `idx` into `([B,N,D] inputs, [B,N,D] targets)`.
    pub fn batch(&self, idx: &[usize], dtype: DType) -> (Tensor, Tensor) {
        let rec = self.seq_len * self.width;
        let mut ins = Vec::with_capacity(idx.len() * rec);
        let mut outs = Vec::with_capacity(idx.len() * rec);
        for &i in idx {
            ins.extend(self.inputs[i * rec..(i + 1) * rec].iter().map(|&v| v as f64));
            outs.extend(self.targets[i * rec..(i + 1) * rec].iter().map(|&v| v as f64));
        }
        let shape = [idx.len(), self.seq_len, self.width];
        (
            Tensor::from_f64_as(&shape, &ins, dtype).unwrap(),
            Tensor::from_f64_as(&shape, &outs, dtype).unwrap(),
        )
    }
}

const CAPTURE_BATCH: usize = 32;

/// Run the frozen teacher over corrupted samples, recording one slot's
/// input and output per record. Deterministic in `seed`.
pub fn capture_activations(
    teacher: &ModelGraph,
    data: &BlobDataset,
    s: &NoiseSchedule,
    target: &CaptureTarget,
    count: usize,
    seed: u64,
) -> Result<ActivationDataset> {
    if count == 0 {
        return Err(Error::InvalidArgument("capture: count must be >= 1".into()));
    }
    if data.is_empty() {
        return Err(Error::InvalidArgument("capture: empty dataset".into()));
    }
    let (layer, slot, modulation_aware) = match target {
        CaptureTarget::Operator { layer, slot, modulation_aware } => {
            if *layer >= teacher.effective_depth() {
                return Err(Error::InvalidArgument(format!(
                    "capture layer {layer} out of range"
                )));
            }
            (*layer, CaptureSlot::from(*slot), *modulation_aware)
        }
        CaptureTarget::PairSpan { pair_index } => {
            if 2 * pair_index + 1 >= teacher.effective_depth() {
                return Err(Error::InvalidArgument(format!(
                    "pair {pair_index} out of range"
                )));
            }
            (*pair_index, CaptureSlot::PairSpan, false)
        }
    };

    let px = BLOB_SIDE * BLOB_SIDE;
    let mut rng = Rng::new(seed ^ 0x6361_7074);
    // All randomness drawn up front, in record order.
    struct Draw {
        item: usize,
        t: usize,
        eps: Vec<f64>,
    }
    let draws: Vec<Draw> = (0..count)
        .map(|_| Draw {
            item: rng.below(data.len()),
            t: rng.below(s.num_steps()),
            eps: rng.normal_vec(px, 1.0),
        })
        .collect();

    let n = teacher.config().seq_len();
    let d = teacher.config().dim;
    let rec = n * d;
    let batches: Vec<Vec<usize>> = (0..count)
        .collect::<Vec<_>>()
        .chunks(CAPTURE_BATCH)
        .map(|c| c.to_vec())
        .collect();

    let chunks = par_map_indexed(batches.len(), None, |bi| -> Result<(Vec<f32>, Vec<f32>)> {
        let rows = &batches[bi];
        let items: Vec<usize> = rows.iter().map(|&r| draws[r].item).collect();
        let images = data.batch(&items, teacher.dtype());
        let alphas: Vec<f64> = rows.iter().map(|&r| s.alpha(draws[r].t)).collect();
        let sigmas: Vec<f64> = rows.iter().map(|&r| s.sigma(draws[r].t)).collect();
        let mut eps_data = Vec::with_capacity(rows.len() * px);
        for &r in rows {
            eps_data.extend_from_slice(&draws[r].eps);
        }
        let dtype = teacher.dtype();
        let eps = Tensor::from_f64_as(images.shape(), &eps_data, dtype)?;
        let bshape = [rows.len(), 1, 1, 1];
        let a_t = Tensor::from_f64_as(&bshape, &alphas, dtype)?;
        let s_t = Tensor::from_f64_as(&bshape, &sigmas, dtype)?;
        let z_t = images.mul(&a_t)?.add(&eps.mul(&s_t)?)?;
        let ts: Vec<usize> = rows.iter().map(|&r| draws[r].t).collect();
        let cs: Vec<usize> = rows.iter().map(|&r| data.label(draws[r].item)).collect();
        let (_, cap) = teacher.forward_with_capture(&Binding::frozen(), &z_t, &ts, &cs, target)?;
        let to_f32 = |t: &Tensor| -> Vec<f32> { t.data_f64().iter().map(|&v| v as f32).collect() };
        Ok((to_f32(&cap.input), to_f32(&cap.output)))
    });

    let mut inputs = Vec::with_capacity(count * rec);
    let mut targets = Vec::with_capacity(count * rec);
    for c in chunks {
        let (i, t) = c?;
        inputs.extend_from_slice(&i);
        targets.extend_from_slice(&t);
    }
    ActivationDataset::from_parts(
        layer,
        slot,
        modulation_aware,
        crate::persistence::model_fingerprint(teacher),
        n,
        d,
        inputs,
        targets,
        draws.iter().map(|d| d.t).collect(),
        draws.iter().map(|d| data.label(d.item)).collect(),
    )
}

// ---------------------------------------------------------------------------
// Stage 1: distillation
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DistillConfig {
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_distill_batch")]
    pub batch_size: usize,
    #[serde(default = "default_distill_lr")]
    pub lr: f64,
    #[serde(default = "default_clip")]
    pub clip_norm: Option<f64>,
    #[serde(default = "default_val_split")]
    pub val_split: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_epochs() -> usize {
    100
}
fn default_distill_batch() -> usize {
    64
}
fn default_distill_lr() -> f64 {
    1e-3
}
fn default_clip() -> Option<f64> {
    Some(10.0)
}
fn default_val_split() -> f64 {
    0.125
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            epochs: default_epochs(),
            batch_size: default_distill_batch(),
            lr: default_distill_lr(),
            clip_norm: default_clip(),
            val_split: default_val_split(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DistillReport {
    /// Mean training objective per epoch.
    pub train_trace: Vec<f64>,
    /// Held-out loss per epoch, always measured as L2.
    pub val_trace: Vec<f64>,
    /// Held-out L2 before the first update.
    pub initial_val: f64,
}

fn split_indices(count: usize, val_split: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(0.0..1.0).contains(&val_split) {
        return Err(Error::InvalidArgument(format!(
            "val_split {val_split} outside [0, 1)"
        )));
    }
    let mut order: Vec<usize> = (0..count).collect();
    let mut rng = Rng::new(seed ^ 0x7370_6C69_7421);
    rng.shuffle(&mut order);
    let v = (val_split * count as f64).floor() as usize;
    let val = order[..v].to_vec();
    let train = order[v..].to_vec();
    if train.is_empty() {
        return Err(Error::InvalidArgument("val_split leaves no training data".into()));
    }
    Ok((train, val))
}

/// Forward used during distillation; pairs need the conditioning path.
trait DistillForward: Module + Sized {
    fn forward_records(
        &self,
        bind: &Binding,
        acts: &ActivationDataset,
        idx: &[usize],
        x: &Tensor,
    ) -> Result<Tensor>;
}

impl DistillForward for TokenMixer {
    fn forward_records(
        &self,
        bind: &Binding,
        _acts: &ActivationDataset,
        _idx: &[usize],
        x: &Tensor,
    ) -> Result<Tensor> {
        self.forward(bind, x)
    }
}

struct PairWithContext<'a> {
    pair: ParallelPair,
    host: &'a ModelGraph,
}

impl Module for PairWithContext<'_> {
    fn visit_params(&self, f: &mut dyn FnMut(&crate::params::Param)) {
        self.pair.visit_params(f)
    }
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut crate::params::Param)) {
        self.pair.visit_params_mut(f)
    }
}

impl DistillForward for PairWithContext<'_> {
    fn forward_records(
        &self,
        bind: &Binding,
        acts: &ActivationDataset,
        idx: &[usize],
        x: &Tensor,
    ) -> Result<Tensor> {
        let ts: Vec<usize> = idx.iter().map(|&i| acts.record_t(i)).collect();
        let cs: Vec<usize> = idx.iter().map(|&i| acts.record_c(i)).collect();
        // Conditioning comes from the frozen host embedders.
        let cond = self.host.condition_vector(&Binding::frozen(), &ts, &cs)?;
        self.pair.forward(bind, x, &cond)
    }
}

fn distill_module<M: DistillForward>(
    module: &mut M,
    acts: &ActivationDataset,
    objective: &RegressionObjective,
    cfg: &DistillConfig,
) -> Result<DistillReport> {
    if acts.is_empty() {
        return Err(Error::InvalidArgument("distill: empty activation dataset".into()));
    }
    let dtype = {
        let mut d = None;
        module.visit_params(&mut |p| d = Some(p.dtype()));
        d.expect("module has parameters")
    };
    let (train_idx, val_idx) = split_indices(acts.len(), cfg.val_split, cfg.seed)?;
    let l2 = RegressionObjective::l2();

    let eval_val = |m: &M| -> Result<f64> {
        if val_idx.is_empty() {
            return Ok(f64::NAN);
        }
        let mut total = 0.0;
        for chunk in val_idx.chunks(cfg.batch_size) {
            let (x, y) = acts.batch(chunk, dtype);
            let pred = m.forward_records(&Binding::frozen(), acts, chunk, &x)?;
            total += l2.loss(&pred, &y)?.item() * chunk.len() as f64;
        }
        Ok(total / val_idx.len() as f64)
    };

    let initial_val = eval_val(module)?;
    let mut opt = AdamW::new(
        module,
        OptimConfig {
            clip_norm: cfg.clip_norm,
            ..OptimConfig::adamw(cfg.lr)
        },
    );
    let mut rng = Rng::new(cfg.seed ^ 0x6469_7374);
    let mut train_trace = Vec::with_capacity(cfg.epochs);
    let mut val_trace = Vec::with_capacity(cfg.epochs);
    let mut order = train_idx.clone();

    for _epoch in 0..cfg.epochs {
        rng.shuffle(&mut order);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let (x, y) = acts.batch(chunk, dtype);
            let bind = Binding::trainable(module);
            let pred = module.forward_records(&bind, acts, chunk, &x)?;
            let loss = objective.loss(&pred, &y)?;
            let value = loss.item();
            if !value.is_finite() {
                return Err(Error::Diverged {
                    step: train_trace.len(),
                    trace: train_trace,
                });
            }
            loss.backward()?;
            let grads: Vec<Option<Vec<f64>>> = bind
                .grads(module)
                .into_iter()
                .map(|g| g.map(|b| b.to_f64_vec()))
                .collect();
            opt.step(module, &grads)?;
            epoch_loss += value * chunk.len() as f64;
        }
        train_trace.push(epoch_loss / train_idx.len() as f64);
        val_trace.push(eval_val(module)?);
    }
    Ok(DistillReport {
        train_trace,
        val_trace,
        initial_val,
    })
}

/// Stage-1 regression of a fresh mixer onto captured teacher activations.
pub fn distill_operator(
    mixer: &mut TokenMixer,
    acts: &ActivationDataset,
    objective: &RegressionObjective,
    cfg: &DistillConfig,
) -> Result<DistillReport> {
    if mixer.config().dim != acts.width {
        return Err(Error::InvalidConfig(format!(
            "mixer width {} != activation width {}",
            mixer.config().dim,
            acts.width
        )));
    }
    distill_module(mixer, acts, objective, cfg)
}

/// Stage-1 regression of a parallel pair onto the sequential span it
/// replaces. Conditioning is recomputed through the frozen host embedders.
pub fn distill_pair(
    pair: &mut ParallelPair,
    host: &ModelGraph,
    acts: &ActivationDataset,
    objective: &RegressionObjective,
    cfg: &DistillConfig,
) -> Result<DistillReport> {
    if acts.slot != CaptureSlot::PairSpan {
        return Err(Error::InvalidArgument(
            "distill_pair requires a pair-span dataset".into(),
        ));
    }
    let mut ctx = PairWithContext {
        pair: pair.clone(),
        host,
    };
    let report = distill_module(&mut ctx, acts, objective, cfg)?;
    *pair = ctx.pair;
    Ok(report)
}

/// One layer's distillation job, for running several layers in parallel.
pub struct DistillJob {
    pub mixer: TokenMixer,
    pub acts: ActivationDataset,
    pub objective: RegressionObjective,
    pub cfg: DistillConfig,
}

/// Run independent jobs with ordered results; `degree` caps worker threads
/// (None uses the default pool). Results are identical for every degree.
pub fn distill_many(jobs: Vec<DistillJob>, degree: Option<usize>) -> Vec<Result<(TokenMixer, DistillReport)>> {
    let jobs: Vec<_> = jobs.into_iter().collect();
    par_map_indexed(jobs.len(), degree, |i| {
        let job = &jobs[i];
        let mut mixer = job.mixer.deep_clone();
        let report = distill_operator(&mut mixer, &job.acts, &job.objective, &job.cfg)?;
        Ok((mixer, report))
    })
}

// ---------------------------------------------------------------------------
// Integration, self-grafting, finetuning, deviation
// ---------------------------------------------------------------------------

/// Install trained replacements per the plan. Everything else in the
/// returned graph is bit-identical to the teacher.
pub fn integrate(teacher: &ModelGraph, plan: &GraftPlan, trained: &[TokenMixer]) -> Result<ModelGraph> {
    if trained.len() != plan.targets.len() {
        return Err(Error::InvalidPlan(format!(
            "{} trained operators for {} plan targets",
            trained.len(),
            plan.targets.len()
        )));
    }
    if plan.depth != teacher.effective_depth() {
        return Err(Error::InvalidPlan(format!(
            "plan depth {} != model depth {}",
            plan.depth,
            teacher.effective_depth()
        )));
    }
    let mut grafted = teacher.clone();
    for (target, mixer) in plan.targets.iter().zip(trained) {
        if mixer.config().kind != target.replacement.kind
            || mixer.config().dim != target.replacement.dim
        {
            return Err(Error::InvalidPlan(format!(
                "layer {}: trained operator {:?} does not match plan {:?}",
                target.layer,
                mixer.config().kind,
                target.replacement.kind
            )));
        }
        grafted = grafted.replace_operator(target.layer, target.slot, mixer.clone())?;
    }
    Ok(grafted)
}

/// Control setup: same-kind operators with freshly drawn weights.
pub fn self_graft(
    teacher: &ModelGraph,
    slot: Slot,
    ratio: f64,
    strategy: Strategy,
    seed: u64,
) -> Result<(GraftPlan, Vec<TokenMixer>)> {
    let depth = teacher.effective_depth();
    // Template from layer 0's own operator; per-layer configs swap in each
    // host layer's config below.
    let template = teacher.entries[0]
        .as_block()
        .ok_or_else(|| Error::InvalidArgument("self_graft requires plain blocks".into()))?
        .slot(slot)
        .config()
        .clone();
    let mut plan = make_plan(strategy, ratio, depth, slot, &template.reseeded(seed), None)?;
    let mut fresh = Vec::with_capacity(plan.targets.len());
    for target in &mut plan.targets {
        let host_cfg = teacher.entries[target.layer]
            .as_block()
            .ok_or_else(|| Error::InvalidArgument("self_graft requires plain blocks".into()))?
            .slot(slot)
            .config()
            .clone();
        target.replacement = host_cfg.reseeded(mix_seed(seed, target.layer));
        fresh.push(TokenMixer::new(target.replacement.clone(), teacher.dtype())?);
    }
    Ok((plan, fresh))
}

/// Stage 2: end-to-end finetune on a deterministic fraction of the data.
/// With `freeze_untouched`, only parameters of the grafted slots update.
pub fn finetune(
    model: &mut ModelGraph,
    s: &NoiseSchedule,
    data: &BlobDataset,
    data_fraction: f64,
    cfg: &TrainConfig,
    freeze_untouched: Option<&GraftPlan>,
) -> Result<Vec<f64>> {
    let subset = data.subset(data_fraction, cfg.seed)?;
    let mask = match freeze_untouched {
        None => None,
        Some(plan) => {
            let mut touched = std::collections::HashSet::new();
            for t in &plan.targets {
                let block = model.entries[t.layer].as_block().ok_or_else(|| {
                    Error::InvalidPlan(format!("layer {} is not a plain block", t.layer))
                })?;
                block.slot(t.slot).visit_params(&mut |p| {
                    touched.insert(p.id());
                });
            }
            let mut mask = Vec::new();
            model.visit_params(&mut |p| mask.push(touched.contains(&p.id())));
            Some(mask)
        }
    };
    train(model, s, &subset, cfg, &mask)
}

/// Probe set for output-deviation measurements.
pub struct ProbeSet {
    pub z_t: Tensor,
    pub ts: Vec<usize>,
    pub cs: Vec<usize>,
}

pub fn build_probe(
    data: &BlobDataset,
    s: &NoiseSchedule,
    count: usize,
    seed: u64,
    dtype: DType,
) -> Result<ProbeSet> {
    if count == 0 || data.is_empty() {
        return Err(Error::InvalidArgument("probe: need data and count >= 1".into()));
    }
    let px = BLOB_SIDE * BLOB_SIDE;
    let mut rng = Rng::new(seed ^ 0x7072_6F62);
    let mut z = Vec::with_capacity(count * px);
    let mut ts = Vec::with_capacity(count);
    let mut cs = Vec::with_capacity(count);
    for _ in 0..count {
        let item = rng.below(data.len());
        let t = rng.below(s.num_steps());
        let (a, sg) = (s.alpha(t), s.sigma(t));
        let img = data.image_f64(item);
        for (j, &v) in img.iter().enumerate() {
            let _ = j;
            z.push(a * v + sg * rng.normal());
        }
        ts.push(t);
        cs.push(data.label(item));
    }
    Ok(ProbeSet {
        z_t: Tensor::from_f64_as(&[count, 1, BLOB_SIDE, BLOB_SIDE], &z, dtype)?,
        ts,
        cs,
    })
}

/// Mean absolute output difference over a probe set; symmetric, zero for
/// identical graphs.
pub fn end_to_end_deviation(a: &ModelGraph, b: &ModelGraph, probe: &ProbeSet) -> Result<f64> {
    let bind = Binding::frozen();
    let ya = a.forward(&bind, &probe.z_t, &probe.ts, &probe.cs)?;
    let yb = b.forward(&bind, &probe.z_t, &probe.ts, &probe.cs)?;
    if ya.shape() != yb.shape() {
        return Err(Error::ShapeMismatch {
            op: "deviation",
            lhs: ya.shape().to_vec(),
            rhs: yb.shape().to_vec(),
        });
    }
    let da = ya.data_f64();
    let db = yb.data_f64();
    let total: f64 = da.iter().zip(&db).map(|(x, y)| (x - y).abs()).sum();
    Ok(total / da.len() as f64)
}
