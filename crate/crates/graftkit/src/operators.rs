//! Token and channel mixers used as grafting candidates: multi-head
//! attention, sliding-window attention, the Hyena-SE/X/Y gated short
//! convolutions, plain MLPs with a variable expansion ratio, and the
//! channel-mixing Hyena-X MLP stand-in.
//!
//! Every kind maps `[B, N, D]` to `[B, N, D]`, which is the whole drop-in
//! contract: a mixer can be swapped into any slot of the model graph with
//! the same width.

use crate::error::{Error, Result};
use crate::params::{Binding, Module, Param};
use crate::rng::Rng;
use crate::tensor::{ConvAxis, DType, Tensor};
use serde::{Deserialize, Serialize};

/// Score offset used to blank out-of-band attention. Large enough that the
/// masked exponentials underflow to exactly zero, small enough to stay
/// finite through the whole pipeline.
pub const MASK_OFF: f64 = -1e9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OperatorKind {
    Mha,
    Swa,
    HyenaSe,
    HyenaX,
    HyenaY,
    Mlp,
    HyenaXMlp,
}

impl OperatorKind {
    pub fn is_attention(self) -> bool {
        matches!(self, OperatorKind::Mha | OperatorKind::Swa)
    }

    pub fn is_hyena(self) -> bool {
        matches!(
            self,
            OperatorKind::HyenaSe | OperatorKind::HyenaX | OperatorKind::HyenaY
        )
    }
}

/// Declarative description of one mixer.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OperatorConfig {
    pub kind: OperatorKind,
    /// Model width D.
    pub dim: usize,
    /// Attention heads H.
    #[serde(default = "default_heads")]
    pub heads: usize,
    /// Convolution taps K.
    #[serde(default = "default_kernel")]
    pub kernel_size: usize,
    /// Window half-width w for sliding-window attention.
    #[serde(default = "default_window")]
    pub window: usize,
    /// MLP expansion ratio r.
    #[serde(default = "default_ratio")]
    pub ratio: usize,
    #[serde(default = "default_causal")]
    pub causal: bool,
    #[serde(default)]
    pub seed: u64,
}

fn default_heads() -> usize {
    4
}
fn default_kernel() -> usize {
    4
}
fn default_window() -> usize {
    4
}
fn default_ratio() -> usize {
    4
}
fn default_causal() -> bool {
    true
}

impl OperatorConfig {
    pub fn mha(dim: usize, heads: usize, seed: u64) -> OperatorConfig {
        OperatorConfig {
            kind: OperatorKind::Mha,
            dim,
            heads,
            kernel_size: default_kernel(),
            window: default_window(),
            ratio: default_ratio(),
            causal: false,
            seed,
        }
    }

    pub fn swa(dim: usize, heads: usize, window: usize, seed: u64) -> OperatorConfig {
        OperatorConfig {
            window,
            kind: OperatorKind::Swa,
            ..OperatorConfig::mha(dim, heads, seed)
        }
    }

    pub fn hyena(kind: OperatorKind, dim: usize, kernel_size: usize, seed: u64) -> OperatorConfig {
        assert!(kind.is_hyena(), "hyena() requires a hyena kind");
        OperatorConfig {
            kind,
            dim,
            heads: default_heads(),
            kernel_size,
            window: default_window(),
            ratio: default_ratio(),
            causal: true,
            seed,
        }
    }

    pub fn mlp(dim: usize, ratio: usize, seed: u64) -> OperatorConfig {
        OperatorConfig {
            kind: OperatorKind::Mlp,
            dim,
            heads: default_heads(),
            kernel_size: default_kernel(),
            window: default_window(),
            ratio,
            causal: false,
            seed,
        }
    }

    pub fn hyena_x_mlp(dim: usize, ratio: usize, kernel_size: usize, seed: u64) -> OperatorConfig {
        OperatorConfig {
            kind: OperatorKind::HyenaXMlp,
            dim,
            heads: default_heads(),
            kernel_size,
            window: default_window(),
            ratio,
            causal: true,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::InvalidConfig("dim must be positive".into()));
        }
        match self.kind {
            OperatorKind::Mha | OperatorKind::Swa => {
                if self.heads == 0 || self.dim % self.heads != 0 {
                    return Err(Error::InvalidConfig(format!(
                        "dim {} must be divisible by heads {}",
                        self.dim, self.heads
                    )));
                }
            }
            OperatorKind::HyenaSe | OperatorKind::HyenaX | OperatorKind::HyenaY => {
                if self.kernel_size == 0 {
                    return Err(Error::InvalidConfig("kernel_size must be >= 1".into()));
                }
                if !self.causal {
                    return Err(Error::InvalidConfig(
                        "hyena mixers support only causal filters".into(),
                    ));
                }
            }
            OperatorKind::Mlp => {
                if self.ratio == 0 {
                    return Err(Error::InvalidConfig("ratio must be positive".into()));
                }
            }
            OperatorKind::HyenaXMlp => {
                if self.ratio == 0 || self.kernel_size == 0 {
                    return Err(Error::InvalidConfig(
                        "ratio and kernel_size must be positive".into(),
                    ));
                }
                if !self.causal {
                    return Err(Error::InvalidConfig(
                        "hyena mixers support only causal filters".into(),
                    ));
                }
            }
        }
        Ok(())
    }

    /// Same structure, different parameter draw.
    pub fn reseeded(&self, seed: u64) -> OperatorConfig {
        OperatorConfig { seed, ..self.clone() }
    }
}

/// A configured mixer with its trainable parameters.
#[derive(Clone)]
pub struct TokenMixer {
    config: OperatorConfig,
    params: Vec<Param>,
}

const PROJ_STD: f64 = 0.02;
const FILTER_NOISE_STD: f64 = 0.02;

fn proj(name: &str, rows: usize, cols: usize, rng: &mut Rng, dtype: DType) -> Param {
    let t = Tensor::randn(&[rows, cols], PROJ_STD, rng, dtype);
    Param::new(name, &t)
}

/// Short depthwise filter initialized at an identity tap plus noise, so a
/// fresh Hyena starts near a gated-linear map.
fn delta_filter(name: &str, chans: usize, k: usize, rng: &mut Rng, dtype: DType) -> Param {
    let mut data = rng.normal_vec(chans * k, FILTER_NOISE_STD);
    for c in 0..chans {
        data[c * k] += 1.0;
    }
    Param::new(name, &Tensor::from_f64_as(&[chans, k], &data, dtype).unwrap())
}

fn zero_bias(name: &str, chans: usize, dtype: DType) -> Param {
    Param::new(name, &Tensor::zeros(&[chans], dtype))
}

impl TokenMixer {
    pub fn new(config: OperatorConfig, dtype: DType) -> Result<TokenMixer> {
        config.validate()?;
        let mut rng = Rng::new(config.seed ^ 0x6D69_7865_7221);
        let d = config.dim;
        let k = config.kernel_size;
        let params = match config.kind {
            OperatorKind::Mha | OperatorKind::Swa => vec![
                proj("wq", d, d, &mut rng, dtype),
                proj("wk", d, d, &mut rng, dtype),
                proj("wv", d, d, &mut rng, dtype),
                proj("wo", d, d, &mut rng, dtype),
            ],
            OperatorKind::HyenaSe => vec![
                proj("w", d, d, &mut rng, dtype),
                proj("u", d, d, &mut rng, dtype),
                proj("p", d, d, &mut rng, dtype),
                proj("m", d, d, &mut rng, dtype),
                delta_filter("filt_t", d, k, &mut rng, dtype),
                zero_bias("bias_t", d, dtype),
                delta_filter("filt_h", d, k, &mut rng, dtype),
                zero_bias("bias_h", d, dtype),
                delta_filter("filt_k", d, k, &mut rng, dtype),
                zero_bias("bias_k", d, dtype),
                delta_filter("filt_g", d, k, &mut rng, dtype),
                zero_bias("bias_g", d, dtype),
            ],
            OperatorKind::HyenaX => vec![
                proj("w", d, d, &mut rng, dtype),
                proj("u", d, d, &mut rng, dtype),
                proj("p", d, d, &mut rng, dtype),
                proj("m", d, d, &mut rng, dtype),
                delta_filter("filt_t", d, k, &mut rng, dtype),
                zero_bias("bias_t", d, dtype),
                delta_filter("filt_h", d, k, &mut rng, dtype),
                zero_bias("bias_h", d, dtype),
                delta_filter("filt_k", d, k, &mut rng, dtype),
                zero_bias("bias_k", d, dtype),
            ],
            OperatorKind::HyenaY => vec![
                proj("w", d, d, &mut rng, dtype),
                proj("u", d, d, &mut rng, dtype),
                proj("p", d, d, &mut rng, dtype),
                proj("m", d, d, &mut rng, dtype),
                delta_filter("filt_g", d, k, &mut rng, dtype),
                zero_bias("bias_g", d, dtype),
            ],
            OperatorKind::Mlp => {
                let hidden = config.ratio * d;
                vec![
                    proj("w1", d, hidden, &mut rng, dtype),
                    proj("w2", hidden, d, &mut rng, dtype),
                ]
            }
            OperatorKind::HyenaXMlp => {
                let hidden = config.ratio * d;
                vec![
                    proj("w", d, hidden, &mut rng, dtype),
                    proj("u", d, hidden, &mut rng, dtype),
                    proj("p", d, hidden, &mut rng, dtype),
                    proj("m", hidden, d, &mut rng, dtype),
                    delta_filter("filt_t", hidden, k, &mut rng, dtype),
                    zero_bias("bias_t", hidden, dtype),
                    delta_filter("filt_h", hidden, k, &mut rng, dtype),
                    zero_bias("bias_h", hidden, dtype),
                    delta_filter("filt_k", hidden, k, &mut rng, dtype),
                    zero_bias("bias_k", hidden, dtype),
                ]
            }
        };
        Ok(TokenMixer { config, params })
    }

    pub fn config(&self) -> &OperatorConfig {
        &self.config
    }

    pub fn dtype(&self) -> DType {
        self.params[0].dtype()
    }

    /// Copy with fresh parameter identities; buffers stay shared until
    /// someone writes.
    pub fn deep_clone(&self) -> TokenMixer {
        let mut copy = self.clone();
        for p in &mut copy.params {
            p.reissue_id();
        }
        copy
    }

    pub fn param(&self, name: &str) -> &Param {
        self.params
            .iter()
            .find(|p| p.name() == name)
            .unwrap_or_else(|| panic!("mixer has no parameter '{name}'"))
    }

    pub fn param_mut(&mut self, name: &str) -> &mut Param {
        self.params
            .iter_mut()
            .find(|p| p.name() == name)
            .unwrap_or_else(|| panic!("mixer has no parameter '{name}'"))
    }

    fn check_input(&self, x: &Tensor) -> Result<(usize, usize, usize)> {
        let s = x.shape();
        if s.len() != 3 || s[2] != self.config.dim {
            return Err(Error::ShapeMismatch {
                op: "mixer-forward",
                lhs: s.to_vec(),
                rhs: vec![0, 0, self.config.dim],
            });
        }
        Ok((s[0], s[1], s[2]))
    }

    /// `[B, N, D] -> [B, N, D]` for every kind.
    pub fn forward(&self, bind: &Binding, x: &Tensor) -> Result<Tensor> {
        match self.config.kind {
            OperatorKind::Mha | OperatorKind::Swa => self.attention_forward(bind, x),
            OperatorKind::HyenaSe | OperatorKind::HyenaX | OperatorKind::HyenaY => {
                self.hyena_forward(bind, x)
            }
            OperatorKind::Mlp => self.mlp_forward(bind, x),
            OperatorKind::HyenaXMlp => self.hyena_x_mlp_forward(bind, x),
        }
    }

    fn qkv_heads(&self, bind: &Binding, x: &Tensor) -> Result<(Tensor, Tensor, Tensor, usize)> {
        let (b, n, d) = self.check_input(x)?;
        let h = self.config.heads;
        let dh = d / h;
        let x2 = x.reshape(&[b * n, d])?;
        let split = |w: &Param| -> Result<Tensor> {
            x2.matmul(&bind.leaf(w))?
                .reshape(&[b, n, h, dh])?
                .permute(&[0, 2, 1, 3])
        };
        Ok((
            split(self.param("wq"))?,
            split(self.param("wk"))?,
            split(self.param("wv"))?,
            dh,
        ))
    }

    fn band_mask(&self, n: usize) -> Tensor {
        let w = self.config.window;
        let mut data = vec![0.0f64; n * n];
        for i in 0..n {
            for j in 0..n {
                if i.abs_diff(j) > w {
                    data[i * n + j] = MASK_OFF;
                }
            }
        }
        Tensor::from_f64_as(&[n, n], &data, self.dtype()).unwrap()
    }

    fn masked_scores(&self, bind: &Binding, x: &Tensor) -> Result<(Tensor, Tensor, usize)> {
        let (_, n, _) = self.check_input(x)?;
        let (q, k, v, dh) = self.qkv_heads(bind, x)?;
        let kt = k.permute(&[0, 1, 3, 2])?;
        let mut scores = q.bmm(&kt)?.scale(1.0 / (dh as f64).sqrt())?;
        if self.config.kind == OperatorKind::Swa {
            scores = scores.add(&self.band_mask(n))?;
        }
        Ok((scores, v, dh))
    }

    fn attention_forward(&self, bind: &Binding, x: &Tensor) -> Result<Tensor> {
        let (b, n, d) = self.check_input(x)?;
        let (scores, v, _) = self.masked_scores(bind, x)?;
        let weights = scores.row_softmax()?;
        let ctx = weights
            .bmm(&v)?
            .permute(&[0, 2, 1, 3])?
            .reshape(&[b * n, d])?;
        ctx.matmul(&bind.leaf(self.param("wo")))?
            .reshape(&[b, n, d])
    }

    /// Post-softmax attention weights, `[B, H, N, N]`. Rejected for
    /// non-attention kinds.
    pub fn attention_weights(&self, bind: &Binding, x: &Tensor) -> Result<Tensor> {
        if !self.config.kind.is_attention() {
            return Err(Error::InvalidArgument(format!(
                "attention_weights on non-attention kind {:?}",
                self.config.kind
            )));
        }
        let (scores, _, _) = self.masked_scores(bind, x)?;
        scores.row_softmax()
    }

    fn hyena_forward(&self, bind: &Binding, x: &Tensor) -> Result<Tensor> {
        if !self.config.causal {
            return Err(Error::InvalidConfig(
                "hyena mixers support only causal filters".into(),
            ));
        }
        let (b, n, d) = self.check_input(x)?;
        let x2 = x.reshape(&[b * n, d])?;
        let dense = |w: &str| -> Result<Tensor> {
            x2.matmul(&bind.leaf(self.param(w)))?.reshape(&[b, n, d])
        };
        let conv = |t: &Tensor, f: &str, bias: &str| -> Result<Tensor> {
            t.conv1d_depthwise_causal(
                &bind.leaf(self.param(f)),
                &bind.leaf(self.param(bias)),
                ConvAxis::Sequence,
            )
        };
        let kind = self.config.kind;
        // q = T(xW), k = H(xU), v = K(xP); Hyena-Y keeps the featurizers
        // at identity.
        let (q, k, v) = if kind == OperatorKind::HyenaY {
            (dense("w")?, dense("u")?, dense("p")?)
        } else {
            (
                conv(&dense("w")?, "filt_t", "bias_t")?,
                conv(&dense("u")?, "filt_h", "bias_h")?,
                conv(&dense("p")?, "filt_k", "bias_k")?,
            )
        };
        let inner = k.mul(&v)?;
        // Inner gate convolution: identity for Hyena-X.
        let gated = match kind {
            OperatorKind::HyenaX => inner,
            _ => conv(&inner, "filt_g", "bias_g")?,
        };
        q.mul(&gated)?
            .reshape(&[b * n, d])?
            .matmul(&bind.leaf(self.param("m")))?
            .reshape(&[b, n, d])
    }

    fn mlp_forward(&self, bind: &Binding, x: &Tensor) -> Result<Tensor> {
        let (b, n, d) = self.check_input(x)?;
        let x2 = x.reshape(&[b * n, d])?;
        x2.matmul(&bind.leaf(self.param("w1")))?
            .gelu()?
            .matmul(&bind.leaf(self.param("w2")))?
            .reshape(&[b, n, d])
    }

    fn hyena_x_mlp_forward(&self, bind: &Binding, x: &Tensor) -> Result<Tensor> {
        let (b, n, d) = self.check_input(x)?;
        let x2 = x.reshape(&[b * n, d])?;
        let hidden = self.config.ratio * d;
        let stream = |w: &str, f: &str, bias: &str| -> Result<Tensor> {
            x2.matmul(&bind.leaf(self.param(w)))?
                .reshape(&[b, n, hidden])?
                .conv1d_depthwise_causal(
                    &bind.leaf(self.param(f)),
                    &bind.leaf(self.param(bias)),
                    ConvAxis::Channel,
                )
        };
        let q = stream("w", "filt_t", "bias_t")?;
        let k = stream("u", "filt_h", "bias_h")?;
        let v = stream("p", "filt_k", "bias_k")?;
        q.mul(&k.mul(&v)?)?
            .reshape(&[b * n, hidden])?
            .matmul(&bind.leaf(self.param("m")))?
            .reshape(&[b, n, d])
    }
}

impl Module for TokenMixer {
    fn visit_params(&self, f: &mut dyn FnMut(&Param)) {
        for p in &self.params {
            f(p);
        }
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        for p in &mut self.params {
            f(p);
        }
    }
}
