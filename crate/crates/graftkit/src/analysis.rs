//! Attention band-locality profiling and exact FLOP / parameter
//! accounting for replacement plans.
//!
//! The locality metric of an attention matrix A is
//! `L_k = (1/N) * sum_ij A_ij * [|i-j| <= k]`, averaged over heads,
//! sampler timesteps, and samples. The FLOP side evaluates closed-form
//! per-operator expressions and reports percentage deltas against the
//! unmodified slot class, split into an "op" bucket (softmax attention,
//! gating, scans) and an "ft" bucket (projections and featurizers).

use crate::diffusion::{NoiseSchedule, SampleConfig, SampleMethod};
use crate::error::{Error, Result};
use crate::graft::GraftPlan;
use crate::model::{ModelGraph, Slot};
use crate::operators::{OperatorConfig, OperatorKind};
use crate::params::Binding;
use crate::rng::Rng;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

// ---------------------------------------------------------------------------
// Band locality
// ---------------------------------------------------------------------------

/// Fraction of attention mass within the band `|i-j| <= k`, normalized by
/// the row count.
pub fn band_locality(a: &Tensor, k: usize) -> Result<f64> {
    let s = a.shape();
    if s.len() != 2 || s[0] != s[1] || s[0] == 0 {
        return Err(Error::InvalidShape {
            op: "band_locality",
            shape: s.to_vec(),
            reason: "expected a square matrix".into(),
        });
    }
    let n = s[0];
    if k > n - 1 {
        return Err(Error::InvalidArgument(format!(
            "band size {k} outside 0..={}",
            n - 1
        )));
    }
    let data = a.data_f64();
    if data.iter().any(|&v| v < 0.0) {
        return Err(Error::InvalidArgument(
            "band_locality: attention entries must be nonnegative".into(),
        ));
    }
    let mut total = 0.0;
    for i in 0..n {
        let row = &data[i * n..(i + 1) * n];
        let lo = i.saturating_sub(k);
        let hi = (i + k).min(n - 1);
        for &v in &row[lo..=hi] {
            total += v;
        }
    }
    Ok(total / n as f64)
}

/// Mass per absolute offset, summed over heads and batch: the cumulative
/// form every `L_k` on the grid reads from.
fn offset_histogram(maps: &Tensor) -> (Vec<f64>, usize, usize) {
    let s = maps.shape();
    let (b, h, n) = (s[0], s[1], s[2]);
    let data = maps.data_f64();
    let mut hist = vec![0.0f64; n];
    for bh in 0..b * h {
        let base = bh * n * n;
        for i in 0..n {
            let row = &data[base + i * n..base + (i + 1) * n];
            for (j, &v) in row.iter().enumerate() {
                hist[i.abs_diff(j)] += v;
            }
        }
    }
    (hist, b * h, n)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LocalityProtocol {
    pub sampler: SampleMethod,
    pub steps: usize,
    pub cfg_scale: f64,
    pub num_samples: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LocalityReport {
    pub k_grid: Vec<usize>,
    /// `curves[layer][i]` is the mean L at `k_grid[i]`.
    pub layers: Vec<usize>,
    pub curves: Vec<Vec<f64>>,
    pub summary_k: usize,
    pub protocol: LocalityProtocol,
}

impl LocalityReport {
    /// Per-layer score at the summary band size, for planner heuristics.
    pub fn summary_scores(&self) -> Vec<f64> {
        let idx = self
            .k_grid
            .iter()
            .position(|&k| k == self.summary_k)
            .expect("summary_k is on the grid");
        self.curves.iter().map(|c| c[idx]).collect()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("layer");
        for k in &self.k_grid {
            out.push_str(&format!(",L_{k}"));
        }
        out.push('\n');
        for (layer, curve) in self.layers.iter().zip(&self.curves) {
            out.push_str(&layer.to_string());
            for v in curve {
                out.push_str(&format!(",{v:.6}"));
            }
            out.push('\n');
        }
        out
    }
}

pub fn default_k_grid(n: usize) -> Vec<usize> {
    let mut grid = Vec::new();
    let mut k = 1;
    while k < n - 1 {
        grid.push(k);
        k *= 2;
    }
    grid.push(n - 1);
    grid
}

/// Profile attention locality along a guided sampling trajectory,
/// averaging over heads, timesteps, and samples. Classes cycle over the
/// label set.
pub fn locality_profile(
    model: &ModelGraph,
    s: &NoiseSchedule,
    protocol: &LocalityProtocol,
) -> Result<LocalityReport> {
    let n = model.config().seq_len();
    let attention_layers: Vec<usize> = model
        .entries
        .iter()
        .enumerate()
        .filter_map(|(i, e)| {
            e.as_block()
                .filter(|b| b.mixer.config().kind.is_attention())
                .map(|_| i)
        })
        .collect();
    if attention_layers.is_empty() {
        return Err(Error::InvalidArgument(
            "locality_profile: model has no attention layers".into(),
        ));
    }
    if protocol.num_samples == 0 || protocol.steps == 0 || protocol.steps > s.num_steps() {
        return Err(Error::InvalidArgument(
            "locality_profile: bad sampler protocol".into(),
        ));
    }

    let count = protocol.num_samples;
    let classes: Vec<usize> = (0..count).map(|i| i % model.config().num_classes).collect();
    let mc = model.config();
    let shape = [count, mc.channels, mc.image_size, mc.image_size];
    let mut rng = Rng::new(protocol.seed ^ 0x6C6F_6361);
    let mut z = Tensor::randn(&shape, 1.0, &mut rng, model.dtype());
    let bind = Binding::frozen();

    // Accumulated offset histograms per profiled layer.
    let mut hists: Vec<Vec<f64>> = vec![vec![0.0; n]; attention_layers.len()];
    let mut weight = 0.0f64;

    let ladder: Vec<usize> = {
        let cfg = SampleConfig {
            method: protocol.sampler,
            steps: protocol.steps,
            cfg_scale: protocol.cfg_scale,
            seed: protocol.seed,
        };
        // Mirror the sampler's spacing.
        let mut ts: Vec<usize> = (0..cfg.steps)
            .map(|i| {
                if cfg.steps == 1 {
                    0
                } else {
                    ((s.num_steps() - 1) as f64 * i as f64 / (cfg.steps - 1) as f64).round()
                        as usize
                }
            })
            .collect();
        ts.dedup();
        ts.reverse();
        ts
    };

    for (step_i, &t) in ladder.iter().enumerate() {
        let ts = vec![t; count];
        // Attention statistics come from the conditional branch.
        let (eps_cond, maps) = model.forward_with_attention(&bind, &z, &ts, &classes)?;
        for ((_, map), hist) in maps.iter().zip(hists.iter_mut()) {
            let (h, groups, _) = offset_histogram(map);
            for (acc, v) in hist.iter_mut().zip(&h) {
                *acc += v / groups as f64;
            }
        }
        weight += 1.0;

        let eps_hat = if protocol.cfg_scale == 1.0 {
            eps_cond
        } else {
            let nulls = vec![model.config().null_class(); count];
            let eps_null = model.forward(&bind, &z, &ts, &nulls)?;
            eps_null.add(&eps_cond.sub(&eps_null)?.scale(protocol.cfg_scale)?)?
        };
        let prev = ladder.get(step_i + 1).copied();
        let (alpha_t, sigma_t) = (s.alpha(t), s.sigma(t));
        let z0 = z.sub(&eps_hat.scale(sigma_t)?)?.scale(1.0 / alpha_t)?;
        z = match prev {
            None => z0,
            Some(tp) => z0.scale(s.alpha(tp))?.add(&eps_hat.scale(s.sigma(tp))?)?,
        };
    }

    let k_grid = default_k_grid(n);
    let summary_k = *k_grid
        .iter()
        .filter(|&&k| k <= 32)
        .last()
        .unwrap_or(&k_grid[0]);
    let curves = hists
        .iter()
        .map(|hist| {
            let mut cum = Vec::with_capacity(k_grid.len());
            for &k in &k_grid {
                let mass: f64 = hist[..=k].iter().sum();
                cum.push(mass / (n as f64 * weight));
            }
            cum
        })
        .collect();
    Ok(LocalityReport {
        k_grid,
        layers: attention_layers,
        curves,
        summary_k,
        protocol: protocol.clone(),
    })
}

/// Minimal line plot of the locality curves; presentation only.
pub fn locality_svg(report: &LocalityReport) -> String {
    let (w, h, pad) = (640.0, 400.0, 40.0);
    let kmax = *report.k_grid.last().unwrap_or(&1) as f64;
    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">\n\
         <rect width=\"{w}\" height=\"{h}\" fill=\"white\"/>\n\
         <line x1=\"{pad}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>\n\
         <line x1=\"{pad}\" y1=\"{pad}\" x2=\"{pad}\" y2=\"{}\" stroke=\"black\"/>\n",
        h - pad,
        w - pad,
        h - pad,
        h - pad
    );
    for (li, curve) in report.curves.iter().enumerate() {
        let hue = (li * 360) / report.curves.len().max(1);
        let pts: Vec<String> = report
            .k_grid
            .iter()
            .zip(curve)
            .map(|(&k, &v)| {
                let x = pad + (w - 2.0 * pad) * (k as f64 / kmax);
                let y = (h - pad) - (h - 2.0 * pad) * v;
                format!("{x:.1},{y:.1}")
            })
            .collect();
        svg.push_str(&format!(
            "<polyline fill=\"none\" stroke=\"hsl({hue},70%,45%)\" stroke-width=\"1.5\" points=\"{}\"/>\n",
            pts.join(" ")
        ));
        svg.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" font-size=\"10\" fill=\"hsl({hue},70%,45%)\">layer {}</text>\n",
            w - pad + 4.0,
            (h - pad) - (h - 2.0 * pad) * curve.last().copied().unwrap_or(0.0),
            report.layers[li]
        ));
    }
    svg.push_str("</svg>\n");
    svg
}

// ---------------------------------------------------------------------------
// FLOP accounting
// ---------------------------------------------------------------------------

/// How the channel-mixing Hyena-X MLP variant is charged.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HxMlpFlopConvention {
    /// Featurizer convolutions uncharged; gating counted over the widened
    /// rD channels. Matches the reported per-plan deltas.
    #[default]
    Uncharged,
    /// Featurizer charged at `6LDK` and gating at `2LD`, reading the
    /// closed-form expressions literally.
    Charged,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BucketClass {
    /// Mixing core: softmax attention, gating, scans, inner convolutions.
    Op,
    /// Projections and featurizers.
    Ft,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FlopBuckets {
    pub terms: Vec<(String, u64, BucketClass)>,
}

impl FlopBuckets {
    pub fn op(&self) -> u64 {
        self.terms
            .iter()
            .filter(|(_, _, c)| *c == BucketClass::Op)
            .map(|(_, v, _)| v)
            .sum()
    }

    pub fn ft(&self) -> u64 {
        self.terms
            .iter()
            .filter(|(_, _, c)| *c == BucketClass::Ft)
            .map(|(_, v, _)| v)
            .sum()
    }

    pub fn total(&self) -> u64 {
        self.terms.iter().map(|(_, v, _)| v).sum()
    }

    pub fn term(&self, name: &str) -> u64 {
        self.terms
            .iter()
            .find(|(n, _, _)| n == name)
            .map(|(_, v, _)| *v)
            .unwrap_or(0)
    }
}

/// Closed-form FLOPs for one operator at sequence length `l`.
///
/// For attention-slot kinds the projections/featurizers land in the ft
/// bucket and the mixing core in op; MLP-slot kinds are charged entirely
/// as op (their table rows are not decomposed).
pub fn operator_flops(cfg: &OperatorConfig, l: usize) -> Result<FlopBuckets> {
    operator_flops_with(cfg, l, HxMlpFlopConvention::default())
}

pub fn operator_flops_with(
    cfg: &OperatorConfig,
    l: usize,
    hx_mlp: HxMlpFlopConvention,
) -> Result<FlopBuckets> {
    if l == 0 {
        return Err(Error::InvalidArgument("sequence length must be >= 1".into()));
    }
    cfg.validate()?;
    let (l, d, hds, k, w, r) = (
        l as u64,
        cfg.dim as u64,
        cfg.heads as u64,
        cfg.kernel_size as u64,
        cfg.window as u64,
        cfg.ratio as u64,
    );
    use BucketClass::{Ft, Op};
    let terms = match cfg.kind {
        OperatorKind::Mha => vec![
            ("in_proj".into(), 6 * l * d * d, Ft),
            ("attention".into(), 4 * l * l * d + 2 * hds * l * l, Op),
            ("out_proj".into(), 2 * l * d * d, Ft),
        ],
        OperatorKind::Swa => {
            let keys = 2 * w + 1;
            vec![
                ("in_proj".into(), 6 * l * d * d, Ft),
                ("attention".into(), 4 * l * keys * d + 2 * hds * l * keys, Op),
                ("out_proj".into(), 2 * l * d * d, Ft),
            ]
        }
        OperatorKind::HyenaSe => vec![
            ("in_proj".into(), 6 * l * d * d, Ft),
            ("featurizer".into(), 3 * l * d * k * 2, Ft),
            ("inner_conv".into(), l * d * k * 2, Op),
            ("gates".into(), l * d * 2, Op),
            ("out_proj".into(), 2 * l * d * d, Ft),
        ],
        OperatorKind::HyenaX => vec![
            ("in_proj".into(), 6 * l * d * d, Ft),
            ("featurizer".into(), 3 * l * d * k * 2, Ft),
            ("gates".into(), l * d * 2, Op),
            ("out_proj".into(), 2 * l * d * d, Ft),
        ],
        OperatorKind::HyenaY => vec![
            ("in_proj".into(), 6 * l * d * d, Ft),
            ("inner_conv".into(), l * d * k * 2, Op),
            ("gates".into(), l * d * 2, Op),
            ("out_proj".into(), 2 * l * d * d, Ft),
        ],
        OperatorKind::Mlp => vec![("dense".into(), 4 * r * l * d * d, Op)],
        OperatorKind::HyenaXMlp => {
            let mut t = vec![
                ("dense_in".into(), 6 * l * d * d * r, Op),
                ("dense_out".into(), 2 * l * d * d * r, Op),
            ];
            match hx_mlp {
                HxMlpFlopConvention::Uncharged => {
                    t.push(("gates".into(), 2 * l * r * d, Op));
                }
                HxMlpFlopConvention::Charged => {
                    t.push(("featurizer".into(), 3 * l * d * k * 2, Op));
                    t.push(("gates".into(), 2 * l * d, Op));
                }
            }
            t
        }
    };
    Ok(FlopBuckets { terms })
}

/// Trainable-scalar count of one operator: dense weights plus depthwise
/// filters with per-channel biases.
pub fn param_count(cfg: &OperatorConfig) -> Result<u64> {
    cfg.validate()?;
    let (d, k, r) = (cfg.dim as u64, cfg.kernel_size as u64, cfg.ratio as u64);
    let conv = d * k + d;
    Ok(match cfg.kind {
        OperatorKind::Mha | OperatorKind::Swa => 4 * d * d,
        OperatorKind::HyenaSe => 4 * d * d + 4 * conv,
        OperatorKind::HyenaX => 4 * d * d + 3 * conv,
        OperatorKind::HyenaY => 4 * d * d + conv,
        OperatorKind::Mlp => 2 * r * d * d,
        OperatorKind::HyenaXMlp => {
            let hidden = r * d;
            4 * r * d * d + 3 * (hidden * k + hidden)
        }
    })
}

// ---------------------------------------------------------------------------
// Mamba-2 expression (accounting only; the operator itself is not built)
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Mamba2Config {
    pub dim: usize,
    /// Expansion factor E.
    pub expand: usize,
    /// State size d_state.
    pub d_state: usize,
}

/// Closed-form Mamba-2 FLOPs. The associative scan is the mixing core;
/// projections, the short convolution, featurization, and the output
/// layer count as featurizer-class compute.
pub fn mamba2_flops(cfg: &Mamba2Config, l: usize) -> FlopBuckets {
    let (l, d, e, ds) = (
        l as u64,
        cfg.dim as u64,
        cfg.expand as u64,
        cfg.d_state as u64,
    );
    use BucketClass::{Ft, Op};
    FlopBuckets {
        terms: vec![
            ("projections".into(), 8 * l * d * d * e, Ft),
            ("short_conv".into(), 6 * l * d * e, Ft),
            (
                "featurization".into(),
                2 * l * d * e * (1 + 2 * ds) + 2 * l * d * e,
                Ft,
            ),
            ("scan".into(), 2 * l * d * e * ds, Op),
            ("output".into(), 2 * l * d * d * e, Ft),
        ],
    }
}

// ---------------------------------------------------------------------------
// Delta report
// ---------------------------------------------------------------------------

/// The reference large-model geometry the cost tables are computed on:
/// depth 28, width 1152, 16 heads, 256 tokens, MLP ratio 4.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BaselineConfig {
    pub depth: usize,
    pub dim: usize,
    pub heads: usize,
    pub seq_len: usize,
    pub mlp_ratio: usize,
}

impl BaselineConfig {
    pub fn xl2() -> BaselineConfig {
        BaselineConfig {
            depth: 28,
            dim: 1152,
            heads: 16,
            seq_len: 256,
            mlp_ratio: 4,
        }
    }

    fn slot_operator(&self, slot: Slot) -> OperatorConfig {
        match slot {
            Slot::Mha => OperatorConfig::mha(self.dim, self.heads, 0),
            Slot::Mlp => OperatorConfig::mlp(self.dim, self.mlp_ratio, 0),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LayerCost {
    pub layer: usize,
    pub kind: OperatorKind,
    pub replaced: bool,
    pub op_flops: u64,
    pub ft_flops: u64,
    pub params: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FlopReport {
    pub baseline: BaselineConfig,
    pub slot: Slot,
    pub layers: Vec<LayerCost>,
    pub before_op: u64,
    pub before_ft: u64,
    pub before_params: u64,
    pub after_op: u64,
    pub after_ft: u64,
    pub after_params: u64,
    /// Percentage changes over the slot class across all layers.
    pub delta_op_pct: f64,
    pub delta_ft_pct: f64,
    pub delta_param_pct: f64,
}

fn pct(before: u64, after: u64) -> f64 {
    if before == 0 {
        return 0.0;
    }
    (after as f64 - before as f64) / before as f64 * 100.0
}

impl FlopReport {
    pub fn to_csv(&self) -> String {
        let mut out =
            String::from("layer,kind,replaced,op_flops,ft_flops,params\n");
        for l in &self.layers {
            out.push_str(&format!(
                "{},{:?},{},{},{},{}\n",
                l.layer, l.kind, l.replaced, l.op_flops, l.ft_flops, l.params
            ));
        }
        out.push_str(&format!(
            "delta,op_pct={:.2},ft_pct={:.2},param_pct={:.2},,\n",
            self.delta_op_pct, self.delta_ft_pct, self.delta_param_pct
        ));
        out
    }
}

/// Cost deltas of a plan against the baseline's slot class. Percentages
/// are over the summed slot-class totals across every layer, which is
/// what makes partial-replacement rows scale with the ratio.
pub fn delta_report(baseline: &BaselineConfig, plan: &GraftPlan) -> Result<FlopReport> {
    delta_report_with(baseline, plan, HxMlpFlopConvention::default())
}

pub fn delta_report_with(
    baseline: &BaselineConfig,
    plan: &GraftPlan,
    hx_mlp: HxMlpFlopConvention,
) -> Result<FlopReport> {
    if plan.depth != baseline.depth {
        return Err(Error::InvalidPlan(format!(
            "plan depth {} != baseline depth {}",
            plan.depth, baseline.depth
        )));
    }
    let slot = plan
        .targets
        .first()
        .map(|t| t.slot)
        .ok_or_else(|| Error::InvalidPlan("plan has no targets".into()))?;
    if plan.targets.iter().any(|t| t.slot != slot) {
        return Err(Error::InvalidPlan(
            "delta_report expects a single-slot plan".into(),
        ));
    }
    let host = baseline.slot_operator(slot);
    let host_flops = operator_flops_with(&host, baseline.seq_len, hx_mlp)?;
    let host_params = param_count(&host)?;

    let mut layers = Vec::with_capacity(baseline.depth);
    let (mut before_op, mut before_ft, mut before_params) = (0u64, 0u64, 0u64);
    let (mut after_op, mut after_ft, mut after_params) = (0u64, 0u64, 0u64);
    for layer in 0..baseline.depth {
        before_op += host_flops.op();
        before_ft += host_flops.ft();
        before_params += host_params;
        let target = plan.targets.iter().find(|t| t.layer == layer);
        let (kind, replaced, fl, pr) = match target {
            Some(t) => {
                let mut cfg = t.replacement.clone();
                cfg.dim = baseline.dim;
                cfg.heads = baseline.heads;
                (
                    cfg.kind,
                    true,
                    operator_flops_with(&cfg, baseline.seq_len, hx_mlp)?,
                    param_count(&cfg)?,
                )
            }
            None => (host.kind, false, host_flops.clone(), host_params),
        };
        after_op += fl.op();
        after_ft += fl.ft();
        after_params += pr;
        layers.push(LayerCost {
            layer,
            kind,
            replaced,
            op_flops: fl.op(),
            ft_flops: fl.ft(),
            params: pr,
        });
    }
    Ok(FlopReport {
        baseline: baseline.clone(),
        slot,
        layers,
        before_op,
        before_ft,
        before_params,
        after_op,
        after_ft,
        after_params,
        delta_op_pct: pct(before_op, after_op),
        delta_ft_pct: pct(before_ft, after_ft),
        delta_param_pct: pct(before_params, after_params),
    })
}

/// Percentage deltas for replacing a fraction of the attention slots with
/// Mamba-2, evaluated directly from the closed-form expressions.
pub fn mamba2_delta(
    baseline: &BaselineConfig,
    cfg: &Mamba2Config,
    ratio: f64,
) -> Result<(f64, f64)> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::InvalidArgument(format!(
            "ratio {ratio} outside [0, 1]"
        )));
    }
    let replaced = (ratio * baseline.depth as f64).round() as u64;
    let kept = baseline.depth as u64 - replaced;
    let host = operator_flops(
        &OperatorConfig::mha(baseline.dim, baseline.heads, 0),
        baseline.seq_len,
    )?;
    let mamba = mamba2_flops(cfg, baseline.seq_len);
    let before_op = baseline.depth as u64 * host.op();
    let before_ft = baseline.depth as u64 * host.ft();
    let after_op = kept * host.op() + replaced * mamba.op();
    let after_ft = kept * host.ft() + replaced * mamba.ft();
    Ok((pct(before_op, after_op), pct(before_ft, after_ft)))
}
