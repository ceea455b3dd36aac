use thiserror::Error;

/// Error type shared across the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shapes do not line up for the requested operation.
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// A configuration value violates its invariants.
    #[error("invalid config: {0}")]
    Config(String),

    /// Caller-supplied data violates a precondition.
    #[error("invalid input: {0}")]
    Input(String),

    /// Non-finite values or other numeric failures.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Training aborted (non-finite loss, schema mismatch mid-run).
    #[error("training aborted: {0}")]
    Training(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
