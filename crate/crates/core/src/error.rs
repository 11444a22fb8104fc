//! Crate-wide error type.

use thiserror::Error;

/// Errors produced by any radfas component.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor or matrix dimensions do not line up.
    #[error("shape mismatch: {0}")]
    Shape(String),
    /// An index (class label, domain id, row) is out of range.
    #[error("index out of range: {0}")]
    Index(String),
    /// An API contract was violated (e.g. non-scalar loss passed to backward).
    #[error("contract violation: {0}")]
    Contract(String),
    /// Invalid or inconsistent configuration.
    #[error("config error: {0}")]
    Config(String),
    /// An iterative fit failed to converge.
    #[error("fit error: {0}")]
    Fit(String),
    /// A metric could not be computed from the given data.
    #[error("metric error: {0}")]
    Metric(String),
    /// Numerical breakdown (non-finite values, singular matrix).
    #[error("numerical error: {0}")]
    Numerical(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),
}

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;
