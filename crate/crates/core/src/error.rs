//! Crate-wide error type.

/// Errors surfaced by library operations. Invariant breaches inside numeric
/// kernels (shape mismatches and the like) panic instead, since they are
/// programming errors rather than data conditions.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("invalid data: {0}")]
    InvalidData(String),
    #[error("unknown token `{0}`")]
    UnknownToken(String),
    #[error("subject {0} has an empty positive set")]
    EmptyPositives(usize),
    #[error("candidate pool has {got} entries, expected {expected}")]
    PoolSize { expected: usize, got: usize },
    #[error("model is untrained: {0}")]
    Untrained(String),
    #[error("length mismatch: {0}")]
    LengthMismatch(String),
    #[error("stage `{stage}` failed: {reason}")]
    StageFailure { stage: String, reason: String },
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
