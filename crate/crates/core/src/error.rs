use thiserror::Error;

/// Errors raised anywhere in the estimation pipeline.
#[derive(Debug, Error)]
pub enum OarError {
    /// An argument fell outside the mathematical domain of an operation.
    #[error("domain error: {0}")]
    Domain(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    /// A row-level parse failure while reading tabular data.
    #[error("parse error at row {row}: {message}")]
    Parse { row: usize, message: String },

    /// A backward pass was attempted with parameters that no longer match the forward cache.
    #[error("stale cache: parameters changed since the forward pass")]
    StaleCache,

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, OarError>;

pub(crate) fn domain<T>(msg: impl Into<String>) -> Result<T> {
    Err(OarError::Domain(msg.into()))
}

pub(crate) fn shape<T>(msg: impl Into<String>) -> Result<T> {
    Err(OarError::Shape(msg.into()))
}
