use std::io;

/// Errors produced anywhere in the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("non-finite function value while probing coordinate {coord}")]
    NonFiniteProbe { coord: usize },
    #[error("invalid layout: {0}")]
    Layout(String),
    #[error("malformed file at byte {offset}: {reason}")]
    Format { offset: usize, reason: String },
    #[error("cache error: {0}")]
    Cache(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("config mismatch: {0}")]
    ConfigMismatch(String),
    #[error("sampling produced a non-finite value at step {step}")]
    SamplingDiverged { step: usize },
    #[error("training diverged at step {step} (loss {loss})")]
    Diverged { step: usize, loss: f64 },
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
