use thiserror::Error;

/// Errors surfaced by the numeric kernels, adapter math, optimizers, scoring,
/// and the training harness.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("optimizer diverged: {0}")]
    Diverged(String),

    #[error("scorer '{scorer}' reads the variational posterior, but the active optimizer does not maintain one")]
    PosteriorUnavailable { scorer: String },

    #[error("insufficient history: {0}")]
    InsufficientHistory(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
