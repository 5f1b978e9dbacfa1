use thiserror::Error;

/// Crate-wide error type.
#[derive(Error, Debug)]
pub enum Error {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: invalid shape {shape:?}: {reason}")]
    InvalidShape {
        op: &'static str,
        shape: Vec<usize>,
        reason: String,
    },
    #[error("{op}: dtype mismatch ({lhs:?} vs {rhs:?})")]
    DTypeMismatch {
        op: &'static str,
        lhs: crate::tensor::DType,
        rhs: crate::tensor::DType,
    },
    #[error("{op}: non-finite value in output")]
    NonFinite { op: &'static str },
    #[error("backward: loss must be a scalar, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("backward: tensor is not attached to a tape")]
    DetachedLoss,
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("invalid plan: {0}")]
    InvalidPlan(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("training diverged at step {step}: loss is not finite")]
    Diverged { step: usize, trace: Vec<f64> },
    #[error("io error at {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("format error in {path}: {reason}")]
    Format { path: String, reason: String },
    #[error("{path}: unsupported format version {found} (expected {expected})")]
    VersionMismatch {
        path: String,
        found: u32,
        expected: u32,
    },
    #[error("{path}: content hash mismatch (manifest {expected}, file {found})")]
    HashMismatch {
        path: String,
        expected: String,
        found: String,
    },
    #[error("{path}: artifact kind is '{found}', expected '{expected}'")]
    KindMismatch {
        path: String,
        expected: String,
        found: String,
    },
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
