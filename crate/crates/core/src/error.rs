//! Error type shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid layer index {layer}: backend has {count} layers")]
    InvalidLayer { layer: usize, count: usize },

    #[error("prompt length {len} exceeds context window {window}")]
    PromptTooLong { len: usize, window: usize },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("token id {id} out of range for vocab of size {size}")]
    UnknownToken { id: usize, size: usize },

    #[error("degenerate steering direction: raw norm {norm:.3e} below threshold {threshold:.3e}")]
    DegenerateDirection { norm: f64, threshold: f64 },

    #[error("undefined alignment: zero-norm activation")]
    UndefinedAlignment,

    #[error("unknown prompt {0:?} in concept space")]
    UnknownPrompt(String),

    #[error("unknown subset tag {0:?}")]
    UnknownTag(String),

    #[error("unknown answer {0:?}")]
    UnknownAnswer(String),

    #[error("no consensus: every agent answer was absent")]
    NoConsensus,

    #[error("metric undefined: {0}")]
    UndefinedMetric(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("generator failed: {0}")]
    Generator(String),

    #[error("rewriter client failed: {0}")]
    Rewriter(String),

    #[error("no JSON object found in text")]
    NoJson,

    #[error("validation failed: {0}")]
    Validation(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
