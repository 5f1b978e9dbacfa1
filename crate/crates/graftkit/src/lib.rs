//! graftkit: a desk-scale workbench for editing pretrained diffusion
//! transformers.
//!
//! The crate trains a toy class-conditional DiT on a synthetic dataset,
//! then supports swapping its attention/MLP operators for efficient
//! alternatives (sliding-window attention, gated short convolutions,
//! variable-ratio MLPs) in two stages: per-operator activation regression
//! against the frozen teacher, followed by lightweight end-to-end
//! finetuning. Alongside the pipeline it provides attention band-locality
//! profiling, exact FLOP/parameter accounting for replacement plans, a
//! depth-halving block-pair rewiring, and bit-exact artifact persistence.

#[cfg(feature = "fast-alloc")]
#[global_allocator]
static ALLOC: mimalloc::MiMalloc = mimalloc::MiMalloc;

pub mod analysis;
pub mod diffusion;
pub mod graft;
pub mod error;
pub mod model;
pub mod operators;
pub mod optim;
pub mod par;
pub mod params;
pub mod persistence;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
pub use rng::Rng;
pub use tensor::{DType, Tensor};
