//! Toy class-conditional diffusion transformer: patchify, a stack of
//! adaLN-Zero blocks with swappable mixer/MLP slots, modulated final
//! projection, unpatchify. Supports per-layer operator replacement and
//! pairwise block parallelization.

use crate::error::{Error, Result};
use crate::operators::{OperatorConfig, TokenMixer};
use crate::params::{Binding, Module, Param};
use crate::rng::Rng;
use crate::tensor::{concat_last_dim, Buf, DType, Tensor};
use serde::{Deserialize, Serialize};
use std::sync::Arc;

const LN_EPS: f64 = 1e-6;
const TIME_EMBED_DIM: usize = 128;
const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiTConfig {
    pub depth: usize,
    pub dim: usize,
    pub heads: usize,
    pub patch: usize,
    pub image_size: usize,
    pub channels: usize,
    pub num_classes: usize,
    #[serde(default = "default_mlp_ratio")]
    pub mlp_ratio: usize,
    /// Label-drop probability during training, for classifier-free guidance.
    #[serde(default = "default_cfg_dropout")]
    pub cfg_dropout: f64,
    /// Number of diffusion steps the conditioning accepts.
    #[serde(default = "default_max_t")]
    pub max_t: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_dtype")]
    pub dtype: DType,
}

fn default_mlp_ratio() -> usize {
    4
}
fn default_cfg_dropout() -> f64 {
    0.1
}
fn default_max_t() -> usize {
    1000
}
fn default_dtype() -> DType {
    DType::F32
}

impl DiTConfig {
    /// The toy profile used throughout: depth 8, width 64, 4 heads,
    /// 2x2 patches over a 16x16x1 image, 8 classes.
    pub fn xs(seed: u64) -> DiTConfig {
        DiTConfig {
            depth: 8,
            dim: 64,
            heads: 4,
            patch: 2,
            image_size: 16,
            channels: 1,
            num_classes: 8,
            mlp_ratio: 4,
            cfg_dropout: 0.1,
            max_t: 1000,
            seed,
            dtype: DType::F32,
        }
    }

    pub fn seq_len(&self) -> usize {
        let side = self.image_size / self.patch;
        side * side
    }

    pub fn token_dim(&self) -> usize {
        self.patch * self.patch * self.channels
    }

    /// Index reserved for the dropped/null label.
    pub fn null_class(&self) -> usize {
        self.num_classes
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_size % self.patch != 0 {
            return Err(Error::InvalidConfig(format!(
                "image size {} not divisible by patch {}",
                self.image_size, self.patch
            )));
        }
        if self.depth == 0 || self.dim == 0 || self.num_classes == 0 {
            return Err(Error::InvalidConfig(
                "depth, dim and num_classes must be positive".into(),
            ));
        }
        if self.heads == 0 || self.dim % self.heads != 0 {
            return Err(Error::InvalidConfig(format!(
                "dim {} not divisible by heads {}",
                self.dim, self.heads
            )));
        }
        Ok(())
    }
}

/// Which half of a transformer block an operation targets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Slot {
    Mha,
    Mlp,
}

/// One transformer block: mixer + MLP behind adaLN-Zero modulation.
#[derive(Clone)]
pub struct Block {
    pub mixer: TokenMixer,
    pub mlp: TokenMixer,
    adaln_w: Param,
    adaln_b: Param,
}

/// Everything a block computes in one pass; intermediate handles are cheap
/// clones kept for capture and probes.
pub struct BlockTrace {
    pub out: Tensor,
    pub mixer_input: Tensor,
    pub mixer_raw: Tensor,
    pub gate_msa: Tensor,
    pub mlp_input: Tensor,
    pub mlp_raw: Tensor,
}

fn modulate(x: &Tensor, shift: &Tensor, scale: &Tensor) -> Result<Tensor> {
    // x * (1 + scale) + shift, with [B,1,D] broadcasting over tokens.
    x.add(&x.mul(scale)?)?.add(shift)
}

impl Block {
    fn new(cfg: &DiTConfig, layer: usize, rng: &mut Rng) -> Result<Block> {
        let d = cfg.dim;
        let mixer = TokenMixer::new(
            OperatorConfig::mha(d, cfg.heads, rng.fork(0).next_u64()),
            cfg.dtype,
        )?;
        let mlp = TokenMixer::new(
            OperatorConfig::mlp(d, cfg.mlp_ratio, rng.fork(1).next_u64()),
            cfg.dtype,
        )?;
        let _ = layer;
        Ok(Block {
            mixer,
            mlp,
            adaln_w: Param::new("adaln_w", &Tensor::zeros(&[d, 6 * d], cfg.dtype)),
            adaln_b: Param::new("adaln_b", &Tensor::zeros(&[6 * d], cfg.dtype)),
        })
    }

    pub fn deep_clone(&self) -> Block {
        let mut b = Block {
            mixer: self.mixer.deep_clone(),
            mlp: self.mlp.deep_clone(),
            adaln_w: self.adaln_w.clone(),
            adaln_b: self.adaln_b.clone(),
        };
        b.adaln_w.reissue_id();
        b.adaln_b.reissue_id();
        b
    }

    /// The six modulation vectors, each `[B, 1, D]`.
    fn modulation(&self, bind: &Binding, cond: &Tensor) -> Result<[Tensor; 6]> {
        let b = cond.shape()[0];
        let d = cond.shape()[1];
        let mod6 = cond
            .silu()?
            .matmul(&bind.leaf(&self.adaln_w))?
            .add(&bind.leaf(&self.adaln_b))?;
        let mut parts = Vec::with_capacity(6);
        for i in 0..6 {
            parts.push(mod6.slice(1, i * d, d)?.reshape(&[b, 1, d])?);
        }
        Ok([
            parts[0].clone(),
            parts[1].clone(),
            parts[2].clone(),
            parts[3].clone(),
            parts[4].clone(),
            parts[5].clone(),
        ])
    }

    pub fn forward(&self, bind: &Binding, x: &Tensor, cond: &Tensor) -> Result<Tensor> {
        Ok(self.forward_traced(bind, x, cond)?.out)
    }

    pub fn forward_traced(&self, bind: &Binding, x: &Tensor, cond: &Tensor) -> Result<BlockTrace> {
        let [shift1, scale1, gate1, shift2, scale2, gate2] = self.modulation(bind, cond)?;
        let mixer_input = modulate(&x.layer_norm(LN_EPS)?, &shift1, &scale1)?;
        let mixer_raw = self.mixer.forward(bind, &mixer_input)?;
        let x1 = x.add(&gate1.mul(&mixer_raw)?)?;
        let mlp_input = modulate(&x1.layer_norm(LN_EPS)?, &shift2, &scale2)?;
        let mlp_raw = self.mlp.forward(bind, &mlp_input)?;
        let out = x1.add(&gate2.mul(&mlp_raw)?)?;
        Ok(BlockTrace {
            out,
            mixer_input,
            mixer_raw,
            gate_msa: gate1,
            mlp_input,
            mlp_raw,
        })
    }

    /// Post-softmax attention maps of the mixer slot, if it is an
    /// attention kind.
    pub fn attention_probe(&self, bind: &Binding, x: &Tensor, cond: &Tensor) -> Result<Option<Tensor>> {
        if !self.mixer.config().kind.is_attention() {
            return Ok(None);
        }
        let [shift1, scale1, ..] = self.modulation(bind, cond)?;
        let input = modulate(&x.layer_norm(LN_EPS)?, &shift1, &scale1)?;
        Ok(Some(self.mixer.attention_weights(bind, &input)?))
    }

    pub fn slot(&self, slot: Slot) -> &TokenMixer {
        match slot {
            Slot::Mha => &self.mixer,
            Slot::Mlp => &self.mlp,
        }
    }

    pub fn slot_mut(&mut self, slot: Slot) -> &mut TokenMixer {
        match slot {
            Slot::Mha => &mut self.mixer,
            Slot::Mlp => &mut self.mlp,
        }
    }
}

impl Module for Block {
    fn visit_params(&self, f: &mut dyn FnMut(&Param)) {
        f(&self.adaln_w);
        f(&self.adaln_b);
        self.mixer.visit_params(f);
        self.mlp.visit_params(f);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.adaln_w);
        f(&mut self.adaln_b);
        self.mixer.visit_params_mut(f);
        self.mlp.visit_params_mut(f);
    }
}

/// Two blocks fed the same input; their residual deltas are merged by a
/// learned linear map under an outer skip:
/// `y = x + Merge([A(x) - x ; B(x) - x])`.
#[derive(Clone)]
pub struct ParallelPair {
    pub block_a: Block,
    pub block_b: Block,
    merge_w: Param,
    merge_b: Param,
}

impl ParallelPair {
    /// Branches copied from two sequential blocks; merge starts at `[I | I]`
    /// with zero bias, which sums the two deltas.
    pub fn from_blocks(a: &Block, b: &Block, dim: usize, dtype: DType) -> ParallelPair {
        let mut w = vec![0.0f64; 2 * dim * dim];
        for i in 0..dim {
            w[i * dim + i] = 1.0;
            w[(dim + i) * dim + i] = 1.0;
        }
        ParallelPair {
            block_a: a.deep_clone(),
            block_b: b.deep_clone(),
            merge_w: Param::new(
                "merge_w",
                &Tensor::from_f64_as(&[2 * dim, dim], &w, dtype).unwrap(),
            ),
            merge_b: Param::new("merge_b", &Tensor::zeros(&[dim], dtype)),
        }
    }

    pub fn forward(&self, bind: &Binding, x: &Tensor, cond: &Tensor) -> Result<Tensor> {
        let s = x.shape();
        let (b, n, d) = (s[0], s[1], s[2]);
        let delta_a = self.block_a.forward(bind, x, cond)?.sub(x)?;
        let delta_b = self.block_b.forward(bind, x, cond)?.sub(x)?;
        let cat = concat_last_dim(&[&delta_a, &delta_b])?.reshape(&[b * n, 2 * d])?;
        let merged = cat
            .matmul(&bind.leaf(&self.merge_w))?
            .add(&bind.leaf(&self.merge_b))?
            .reshape(&[b, n, d])?;
        x.add(&merged)
    }

    pub fn deep_clone(&self) -> ParallelPair {
        let mut p = ParallelPair {
            block_a: self.block_a.deep_clone(),
            block_b: self.block_b.deep_clone(),
            merge_w: self.merge_w.clone(),
            merge_b: self.merge_b.clone(),
        };
        p.merge_w.reissue_id();
        p.merge_b.reissue_id();
        p
    }
}

impl Module for ParallelPair {
    fn visit_params(&self, f: &mut dyn FnMut(&Param)) {
        self.block_a.visit_params(f);
        self.block_b.visit_params(f);
        f(&self.merge_w);
        f(&self.merge_b);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.block_a.visit_params_mut(f);
        self.block_b.visit_params_mut(f);
        f(&mut self.merge_w);
        f(&mut self.merge_b);
    }
}

#[derive(Clone)]
pub enum Entry {
    Block(Block),
    Pair(ParallelPair),
}

impl Entry {
    pub fn forward(&self, bind: &Binding, x: &Tensor, cond: &Tensor) -> Result<Tensor> {
        match self {
            Entry::Block(b) => b.forward(bind, x, cond),
            Entry::Pair(p) => p.forward(bind, x, cond),
        }
    }

    pub fn as_block(&self) -> Option<&Block> {
        match self {
            Entry::Block(b) => Some(b),
            Entry::Pair(_) => None,
        }
    }
}

impl Module for Entry {
    fn visit_params(&self, f: &mut dyn FnMut(&Param)) {
        match self {
            Entry::Block(b) => b.visit_params(f),
            Entry::Pair(p) => p.visit_params(f),
        }
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        match self {
            Entry::Block(b) => b.visit_params_mut(f),
            Entry::Pair(p) => p.visit_params_mut(f),
        }
    }
}

/// What to record during a forward pass.
pub enum CaptureTarget {
    /// Input and raw output of one operator slot. With `modulation_aware`,
    /// the target output is gated by the block's attention gate.
    Operator {
        layer: usize,
        slot: Slot,
        modulation_aware: bool,
    },
    /// Token stream entering entry `2*pair_index` and leaving entry
    /// `2*pair_index + 1` (the span a parallel pair replaces).
    PairSpan { pair_index: usize },
}

pub struct Captured {
    pub input: Tensor,
    pub output: Tensor,
}

pub struct ModelGraph {
    config: DiTConfig,
    patch_w: Param,
    patch_b: Param,
    pos_embed: Arc<Buf>,
    t_w1: Param,
    t_b1: Param,
    t_w2: Param,
    t_b2: Param,
    class_table: Param,
    pub entries: Vec<Entry>,
    final_adaln_w: Param,
    final_adaln_b: Param,
    final_w: Param,
    final_b: Param,
}

impl std::fmt::Debug for ModelGraph {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ModelGraph")
            .field("depth", &self.config.depth)
            .field("dim", &self.config.dim)
            .field("entries", &self.entries.len())
            .field("params", &self.param_count())
            .finish()
    }
}

impl Clone for ModelGraph {
    fn clone(&self) -> Self {
        ModelGraph {
            config: self.config.clone(),
            patch_w: self.patch_w.clone(),
            patch_b: self.patch_b.clone(),
            pos_embed: Arc::clone(&self.pos_embed),
            t_w1: self.t_w1.clone(),
            t_b1: self.t_b1.clone(),
            t_w2: self.t_w2.clone(),
            t_b2: self.t_b2.clone(),
            class_table: self.class_table.clone(),
            entries: self.entries.clone(),
            final_adaln_w: self.final_adaln_w.clone(),
            final_adaln_b: self.final_adaln_b.clone(),
            final_w: self.final_w.clone(),
            final_b: self.final_b.clone(),
        }
    }
}

/// Fixed 2-D sin/cos position table `[N, D]`.
fn sincos_pos_embed(cfg: &DiTConfig) -> Buf {
    let side = cfg.image_size / cfg.patch;
    let d = cfg.dim;
    let quarter = d / 4;
    let mut data = vec![0.0f64; side * side * d];
    for row in 0..side {
        for col in 0..side {
            let n = row * side + col;
            for i in 0..quarter {
                let omega = 1.0 / 10000f64.powf(i as f64 / quarter as f64);
                // first half: row axis; second half: column axis
                data[n * d + i] = (row as f64 * omega).sin();
                data[n * d + quarter + i] = (row as f64 * omega).cos();
                data[n * d + 2 * quarter + i] = (col as f64 * omega).sin();
                data[n * d + 3 * quarter + i] = (col as f64 * omega).cos();
            }
        }
    }
    Buf::from_f64_slice(cfg.dtype, &data)
}

/// Sinusoidal features of integer timesteps, `[B, TIME_EMBED_DIM]`.
fn timestep_features(ts: &[usize], dtype: DType) -> Tensor {
    let half = TIME_EMBED_DIM / 2;
    let mut data = vec![0.0f64; ts.len() * TIME_EMBED_DIM];
    for (r, &t) in ts.iter().enumerate() {
        for i in 0..half {
            let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
            let arg = t as f64 * freq;
            data[r * TIME_EMBED_DIM + i] = arg.cos();
            data[r * TIME_EMBED_DIM + half + i] = arg.sin();
        }
    }
    Tensor::from_f64_as(&[ts.len(), TIME_EMBED_DIM], &data, dtype).unwrap()
}

/// Deterministic construction: all blocks MHA + MLP(mlp_ratio), adaLN
/// gates zero so the untrained block stack is the identity on tokens.
pub fn build_model(cfg: &DiTConfig) -> Result<ModelGraph> {
    cfg.validate()?;
    let mut rng = Rng::new(cfg.seed ^ 0x6469_745F_7873);
    let d = cfg.dim;
    let td = cfg.token_dim();
    let dtype = cfg.dtype;
    let normal = |shape: &[usize], rng: &mut Rng| Tensor::randn(shape, INIT_STD, rng, dtype);

    let patch_w = Param::new("patch_w", &normal(&[td, d], &mut rng));
    let patch_b = Param::new("patch_b", &Tensor::zeros(&[d], dtype));
    let t_w1 = Param::new("t_w1", &normal(&[TIME_EMBED_DIM, d], &mut rng));
    let t_b1 = Param::new("t_b1", &Tensor::zeros(&[d], dtype));
    let t_w2 = Param::new("t_w2", &normal(&[d, d], &mut rng));
    let t_b2 = Param::new("t_b2", &Tensor::zeros(&[d], dtype));
    // Extra row is the null class used by label dropout.
    let class_table = Param::new("class_table", &normal(&[cfg.num_classes + 1, d], &mut rng));

    let mut entries = Vec::with_capacity(cfg.depth);
    for layer in 0..cfg.depth {
        let mut block_rng = rng.fork(layer as u64 + 1000);
        entries.push(Entry::Block(Block::new(cfg, layer, &mut block_rng)?));
    }

    Ok(ModelGraph {
        config: cfg.clone(),
        patch_w,
        patch_b,
        pos_embed: Arc::new(sincos_pos_embed(cfg)),
        t_w1,
        t_b1,
        t_w2,
        t_b2,
        class_table,
        entries,
        final_adaln_w: Param::new("final_adaln_w", &Tensor::zeros(&[d, 2 * d], dtype)),
        final_adaln_b: Param::new("final_adaln_b", &Tensor::zeros(&[2 * d], dtype)),
        final_w: Param::new("final_w", &Tensor::zeros(&[d, td], dtype)),
        final_b: Param::new("final_b", &Tensor::zeros(&[td], dtype)),
    })
}

impl ModelGraph {
    pub fn config(&self) -> &DiTConfig {
        &self.config
    }

    pub fn dtype(&self) -> DType {
        self.config.dtype
    }

    /// Graph entries; a pair counts once.
    pub fn effective_depth(&self) -> usize {
        self.entries.len()
    }

    fn image_shape(&self, b: usize) -> Vec<usize> {
        vec![
            b,
            self.config.channels,
            self.config.image_size,
            self.config.image_size,
        ]
    }

    fn patchify(&self, z: &Tensor) -> Result<Tensor> {
        let cfg = &self.config;
        let (b, c) = (z.shape()[0], cfg.channels);
        let side = cfg.image_size / cfg.patch;
        let p = cfg.patch;
        z.reshape(&[b, c, side, p, side, p])?
            .permute(&[0, 2, 4, 3, 5, 1])?
            .reshape(&[b, side * side, p * p * c])
    }

    fn unpatchify(&self, tokens: &Tensor) -> Result<Tensor> {
        let cfg = &self.config;
        let b = tokens.shape()[0];
        let side = cfg.image_size / cfg.patch;
        let p = cfg.patch;
        let c = cfg.channels;
        tokens
            .reshape(&[b, side, side, p, p, c])?
            .permute(&[0, 5, 1, 3, 2, 4])?
            .reshape(&self.image_shape(b))
    }

    /// Conditioning vector per batch item: timestep embedding plus class
    /// embedding (null row for dropped labels).
    fn condition(&self, bind: &Binding, ts: &[usize], cs: &[usize]) -> Result<Tensor> {
        let t_feat = timestep_features(ts, self.config.dtype);
        let t_emb = t_feat
            .matmul(&bind.leaf(&self.t_w1))?
            .add(&bind.leaf(&self.t_b1))?
            .silu()?
            .matmul(&bind.leaf(&self.t_w2))?
            .add(&bind.leaf(&self.t_b2))?;
        let c_emb = bind.leaf(&self.class_table).embedding_lookup(cs)?;
        t_emb.add(&c_emb)
    }

    fn validate_inputs(&self, z_t: &Tensor, ts: &[usize], cs: &[usize]) -> Result<usize> {
        let b = z_t.shape().first().copied().unwrap_or(0);
        if z_t.shape() != self.image_shape(b).as_slice() || b == 0 {
            return Err(Error::ShapeMismatch {
                op: "model-forward",
                lhs: z_t.shape().to_vec(),
                rhs: self.image_shape(b.max(1)),
            });
        }
        if ts.len() != b || cs.len() != b {
            return Err(Error::InvalidArgument(format!(
                "model-forward: {} timesteps / {} labels for batch {b}",
                ts.len(),
                cs.len()
            )));
        }
        if let Some(&t) = ts.iter().find(|&&t| t >= self.config.max_t) {
            return Err(Error::InvalidArgument(format!(
                "timestep {t} out of range 0..{}",
                self.config.max_t
            )));
        }
        if let Some(&c) = cs.iter().find(|&&c| c > self.config.num_classes) {
            return Err(Error::InvalidArgument(format!(
                "class {c} out of range 0..={}",
                self.config.num_classes
            )));
        }
        Ok(b)
    }

    /// Noise prediction: image in, image out.
    pub fn forward(&self, bind: &Binding, z_t: &Tensor, ts: &[usize], cs: &[usize]) -> Result<Tensor> {
        self.run(bind, z_t, ts, cs, None).map(|(y, _)| y)
    }

    /// Forward while recording one capture target.
    pub fn forward_with_capture(
        &self,
        bind: &Binding,
        z_t: &Tensor,
        ts: &[usize],
        cs: &[usize],
        target: &CaptureTarget,
    ) -> Result<(Tensor, Captured)> {
        let (y, cap) = self.run(bind, z_t, ts, cs, Some(target))?;
        cap.map(|c| (y, c)).ok_or_else(|| {
            Error::InvalidArgument("capture target not reached by forward pass".into())
        })
    }

    /// Forward collecting per-layer attention maps `[B, H, N, N]` from
    /// plain-block attention slots.
    pub fn forward_with_attention(
        &self,
        bind: &Binding,
        z_t: &Tensor,
        ts: &[usize],
        cs: &[usize],
    ) -> Result<(Tensor, Vec<(usize, Tensor)>)> {
        let b = self.validate_inputs(z_t, ts, cs)?;
        let _ = b;
        let cond = self.condition(bind, ts, cs)?;
        let mut x = self.embed_tokens(bind, z_t)?;
        let mut maps = Vec::new();
        for (i, entry) in self.entries.iter().enumerate() {
            if let Entry::Block(block) = entry {
                if let Some(w) = block.attention_probe(bind, &x, &cond)? {
                    maps.push((i, w));
                }
            }
            x = entry.forward(bind, &x, &cond)?;
        }
        let y = self.finalize(bind, &x, &cond)?;
        Ok((y, maps))
    }

    fn embed_tokens(&self, bind: &Binding, z_t: &Tensor) -> Result<Tensor> {
        let cfg = &self.config;
        let b = z_t.shape()[0];
        let n = cfg.seq_len();
        let tokens = self.patchify(z_t)?.reshape(&[b * n, cfg.token_dim()])?;
        let pos = Tensor::leaf(&[n, cfg.dim], Arc::clone(&self.pos_embed), false)?;
        tokens
            .matmul(&bind.leaf(&self.patch_w))?
            .add(&bind.leaf(&self.patch_b))?
            .reshape(&[b, n, cfg.dim])?
            .add(&pos)
    }

    fn finalize(&self, bind: &Binding, x: &Tensor, cond: &Tensor) -> Result<Tensor> {
        let cfg = &self.config;
        let (b, d) = (cond.shape()[0], cfg.dim);
        let n = cfg.seq_len();
        let mod2 = cond
            .silu()?
            .matmul(&bind.leaf(&self.final_adaln_w))?
            .add(&bind.leaf(&self.final_adaln_b))?;
        let shift = mod2.slice(1, 0, d)?.reshape(&[b, 1, d])?;
        let scale = mod2.slice(1, d, d)?.reshape(&[b, 1, d])?;
        let h = modulate(&x.layer_norm(LN_EPS)?, &shift, &scale)?;
        let tokens = h
            .reshape(&[b * n, d])?
            .matmul(&bind.leaf(&self.final_w))?
            .add(&bind.leaf(&self.final_b))?
            .reshape(&[b, n, cfg.token_dim()])?;
        self.unpatchify(&tokens)
    }

    fn run(
        &self,
        bind: &Binding,
        z_t: &Tensor,
        ts: &[usize],
        cs: &[usize],
        target: Option<&CaptureTarget>,
    ) -> Result<(Tensor, Option<Captured>)> {
        self.validate_inputs(z_t, ts, cs)?;
        let cond = self.condition(bind, ts, cs)?;
        let mut x = self.embed_tokens(bind, z_t)?;
        let mut captured = None;
        let mut pending_pair_input: Option<Tensor> = None;

        for (i, entry) in self.entries.iter().enumerate() {
            if let Some(CaptureTarget::PairSpan { pair_index }) = target {
                if i == 2 * pair_index {
                    pending_pair_input = Some(x.clone());
                }
            }
            match (entry, target) {
                (Entry::Block(block), Some(CaptureTarget::Operator { layer, slot, modulation_aware }))
                    if *layer == i =>
                {
                    let trace = block.forward_traced(bind, &x, &cond)?;
                    let (input, output) = match slot {
                        Slot::Mha => {
                            let out = if *modulation_aware {
                                trace.gate_msa.mul(&trace.mixer_raw)?
                            } else {
                                trace.mixer_raw.clone()
                            };
                            (trace.mixer_input.clone(), out)
                        }
                        Slot::Mlp => (trace.mlp_input.clone(), trace.mlp_raw.clone()),
                    };
                    captured = Some(Captured { input, output });
                    x = trace.out;
                }
                _ => {
                    x = entry.forward(bind, &x, &cond)?;
                }
            }
            if let Some(CaptureTarget::PairSpan { pair_index }) = target {
                if i == 2 * pair_index + 1 {
                    let input = pending_pair_input.take().ok_or_else(|| {
                        Error::InvalidArgument("pair capture lost its input".into())
                    })?;
                    captured = Some(Captured {
                        input,
                        output: x.clone(),
                    });
                }
            }
        }
        let y = self.finalize(bind, &x, &cond)?;
        Ok((y, captured))
    }

    /// Conditioning vector for external consumers (pair distillation).
    pub fn condition_vector(&self, bind: &Binding, ts: &[usize], cs: &[usize]) -> Result<Tensor> {
        self.condition(bind, ts, cs)
    }

    /// Replace one operator slot, returning an edited graph that shares
    /// every untouched parameter with `self`.
    pub fn replace_operator(&self, layer: usize, slot: Slot, new: TokenMixer) -> Result<ModelGraph> {
        if new.config().dim != self.config.dim {
            return Err(Error::InvalidConfig(format!(
                "replacement width {} != model width {}",
                new.config().dim,
                self.config.dim
            )));
        }
        let block = match self.entries.get(layer) {
            Some(Entry::Block(b)) => b,
            Some(Entry::Pair(_)) => {
                return Err(Error::InvalidArgument(format!(
                    "layer {layer} is a parallel pair; it has no {slot:?} slot"
                )))
            }
            None => {
                return Err(Error::InvalidArgument(format!(
                    "layer {layer} out of range for depth {}",
                    self.entries.len()
                )))
            }
        };
        let mut edited = self.clone();
        let mut new_block = block.clone();
        *new_block.slot_mut(slot) = new;
        edited.entries[layer] = Entry::Block(new_block);
        Ok(edited)
    }

    /// Convert entries (2i, 2i+1) into parallel pairs, halving effective
    /// depth. Requires an even number of plain blocks.
    pub fn parallelize_pairs(&self) -> Result<ModelGraph> {
        if self.entries.len() % 2 != 0 {
            return Err(Error::InvalidArgument(format!(
                "parallelize_pairs requires even depth, got {}",
                self.entries.len()
            )));
        }
        let blocks: Vec<&Block> = self
            .entries
            .iter()
            .map(|e| {
                e.as_block().ok_or_else(|| {
                    Error::InvalidArgument("parallelize_pairs requires plain blocks".into())
                })
            })
            .collect::<Result<_>>()?;
        let mut edited = self.clone();
        edited.entries = blocks
            .chunks(2)
            .map(|pair| {
                Entry::Pair(ParallelPair::from_blocks(
                    pair[0],
                    pair[1],
                    self.config.dim,
                    self.config.dtype,
                ))
            })
            .collect();
        Ok(edited)
    }

    /// Hierarchical (name, param) pairs in visit order.
    pub fn named_params(&self) -> Vec<(String, Param)> {
        let mut out = Vec::new();
        let mut push = |prefix: &str, m: &dyn Module| {
            let mut local = Vec::new();
            m.visit_params(&mut |p| local.push(p.clone()));
            for p in local {
                out.push((format!("{prefix}.{}", p.name()), p));
            }
        };
        push("patch", &PairOf(&self.patch_w, &self.patch_b));
        push("time", &Quad(&self.t_w1, &self.t_b1, &self.t_w2, &self.t_b2));
        push("class", &Single(&self.class_table));
        for (i, entry) in self.entries.iter().enumerate() {
            match entry {
                Entry::Block(b) => {
                    push(&format!("entries.{i}.adaln"), &PairOf(&b.adaln_w, &b.adaln_b));
                    push(&format!("entries.{i}.mixer"), &b.mixer);
                    push(&format!("entries.{i}.mlp"), &b.mlp);
                }
                Entry::Pair(p) => {
                    push(&format!("entries.{i}.a.adaln"), &PairOf(&p.block_a.adaln_w, &p.block_a.adaln_b));
                    push(&format!("entries.{i}.a.mixer"), &p.block_a.mixer);
                    push(&format!("entries.{i}.a.mlp"), &p.block_a.mlp);
                    push(&format!("entries.{i}.b.adaln"), &PairOf(&p.block_b.adaln_w, &p.block_b.adaln_b));
                    push(&format!("entries.{i}.b.mixer"), &p.block_b.mixer);
                    push(&format!("entries.{i}.b.mlp"), &p.block_b.mlp);
                    push(&format!("entries.{i}.merge"), &PairOf(&p.merge_w, &p.merge_b));
                }
            }
        }
        push(
            "final",
            &Quad(&self.final_adaln_w, &self.final_adaln_b, &self.final_w, &self.final_b),
        );
        out
    }
}

/// Serializable description of the graph's shape: the model config plus
/// the operator configs occupying each entry. Together with the parameter
/// payload this fully reconstructs a graph.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelStructure {
    pub config: DiTConfig,
    pub entries: Vec<EntryStructure>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EntryStructure {
    Block {
        mixer: OperatorConfig,
        mlp: OperatorConfig,
    },
    Pair {
        a_mixer: OperatorConfig,
        a_mlp: OperatorConfig,
        b_mixer: OperatorConfig,
        b_mlp: OperatorConfig,
    },
}

impl Block {
    pub(crate) fn from_configs(
        dit: &DiTConfig,
        mixer: &OperatorConfig,
        mlp: &OperatorConfig,
    ) -> Result<Block> {
        let d = dit.dim;
        Ok(Block {
            mixer: TokenMixer::new(mixer.clone(), dit.dtype)?,
            mlp: TokenMixer::new(mlp.clone(), dit.dtype)?,
            adaln_w: Param::new("adaln_w", &Tensor::zeros(&[d, 6 * d], dit.dtype)),
            adaln_b: Param::new("adaln_b", &Tensor::zeros(&[6 * d], dit.dtype)),
        })
    }
}

impl ModelGraph {
    pub fn structure(&self) -> ModelStructure {
        let entries = self
            .entries
            .iter()
            .map(|e| match e {
                Entry::Block(b) => EntryStructure::Block {
                    mixer: b.mixer.config().clone(),
                    mlp: b.mlp.config().clone(),
                },
                Entry::Pair(p) => EntryStructure::Pair {
                    a_mixer: p.block_a.mixer.config().clone(),
                    a_mlp: p.block_a.mlp.config().clone(),
                    b_mixer: p.block_b.mixer.config().clone(),
                    b_mlp: p.block_b.mlp.config().clone(),
                },
            })
            .collect();
        ModelStructure {
            config: self.config.clone(),
            entries,
        }
    }

    /// Rebuild a graph skeleton matching `structure`; parameter values are
    /// placeholders until filled.
    pub fn from_structure(structure: &ModelStructure) -> Result<ModelGraph> {
        let mut model = build_model(&structure.config)?;
        // Each pair spans two of the config's depth slots.
        let spanned: usize = structure
            .entries
            .iter()
            .map(|e| match e {
                EntryStructure::Block { .. } => 1,
                EntryStructure::Pair { .. } => 2,
            })
            .sum();
        if spanned != structure.config.depth {
            return Err(Error::InvalidConfig(format!(
                "structure spans {spanned} layers, config says {}",
                structure.config.depth
            )));
        }
        let dit = &structure.config;
        let mut entries = Vec::with_capacity(structure.entries.len());
        for e in &structure.entries {
            entries.push(match e {
                EntryStructure::Block { mixer, mlp } => {
                    Entry::Block(Block::from_configs(dit, mixer, mlp)?)
                }
                EntryStructure::Pair { a_mixer, a_mlp, b_mixer, b_mlp } => {
                    let a = Block::from_configs(dit, a_mixer, a_mlp)?;
                    let b = Block::from_configs(dit, b_mixer, b_mlp)?;
                    Entry::Pair(ParallelPair::from_blocks(&a, &b, dit.dim, dit.dtype))
                }
            });
        }
        model.entries = entries;
        Ok(model)
    }

    /// Overwrite parameters in visit order; names and shapes must match.
    pub fn fill_params(&mut self, tensors: &[(String, Vec<usize>, Buf)]) -> Result<()> {
        let expected = self.named_params();
        if expected.len() != tensors.len() {
            return Err(Error::InvalidArgument(format!(
                "checkpoint has {} tensors, model needs {}",
                tensors.len(),
                expected.len()
            )));
        }
        for ((name, param), (got_name, got_shape, _)) in expected.iter().zip(tensors) {
            if name != got_name || param.shape() != got_shape.as_slice() {
                return Err(Error::InvalidArgument(format!(
                    "checkpoint tensor '{got_name}' {got_shape:?} does not match '{name}' {:?}",
                    param.shape()
                )));
            }
        }
        let mut idx = 0;
        let mut status = Ok(());
        self.visit_params_mut(&mut |p| {
            if status.is_ok() {
                status = p.set_value(tensors[idx].2.clone());
            }
            idx += 1;
        });
        status
    }
}

struct Single<'a>(&'a Param);
struct PairOf<'a>(&'a Param, &'a Param);
struct Quad<'a>(&'a Param, &'a Param, &'a Param, &'a Param);

impl Module for Single<'_> {
    fn visit_params(&self, f: &mut dyn FnMut(&Param)) {
        f(self.0);
    }
    fn visit_params_mut(&mut self, _f: &mut dyn FnMut(&mut Param)) {
        unreachable!("read-only view");
    }
}

impl Module for PairOf<'_> {
    fn visit_params(&self, f: &mut dyn FnMut(&Param)) {
        f(self.0);
        f(self.1);
    }
    fn visit_params_mut(&mut self, _f: &mut dyn FnMut(&mut Param)) {
        unreachable!("read-only view");
    }
}

impl Module for Quad<'_> {
    fn visit_params(&self, f: &mut dyn FnMut(&Param)) {
        f(self.0);
        f(self.1);
        f(self.2);
        f(self.3);
    }
    fn visit_params_mut(&mut self, _f: &mut dyn FnMut(&mut Param)) {
        unreachable!("read-only view");
    }
}

impl Module for ModelGraph {
    fn visit_params(&self, f: &mut dyn FnMut(&Param)) {
        f(&self.patch_w);
        f(&self.patch_b);
        f(&self.t_w1);
        f(&self.t_b1);
        f(&self.t_w2);
        f(&self.t_b2);
        f(&self.class_table);
        for e in &self.entries {
            e.visit_params(f);
        }
        f(&self.final_adaln_w);
        f(&self.final_adaln_b);
        f(&self.final_w);
        f(&self.final_b);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.patch_w);
        f(&mut self.patch_b);
        f(&mut self.t_w1);
        f(&mut self.t_b1);
        f(&mut self.t_w2);
        f(&mut self.t_b2);
        f(&mut self.class_table);
        for e in &mut self.entries {
            e.visit_params_mut(f);
        }
        f(&mut self.final_adaln_w);
        f(&mut self.final_adaln_b);
        f(&mut self.final_w);
        f(&mut self.final_b);
    }
}

