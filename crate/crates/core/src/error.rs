//! Error type shared across the pipeline.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor or layer shape disagreement. Carries the operator name and a
    /// human-readable dimension diagnostic.
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    /// NaN or infinity detected at an operator boundary.
    #[error("non-finite value in {0}")]
    NonFinite(String),

    /// Invalid run or compression configuration.
    #[error("invalid configuration: {0}")]
    Config(String),

    /// Malformed input data (CSV rows, labels out of range, empty sets).
    #[error("data error: {0}")]
    Data(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    /// Versioned container violations (bad magic, version, or content hash).
    #[error("format error: {0}")]
    Format(String),

    /// Training diverged or produced non-finite values.
    #[error("numeric failure: {0}")]
    Numeric(String),
}

pub type Result<T> = std::result::Result<T, Error>;
