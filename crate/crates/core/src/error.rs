//! Error type shared across the crate.
//!
//! Every error carries enough context to act on (shapes, operation names,
//! record ids). `exit_code` defines the stable process-level contract used
//! by the CLI: 0 success, 1 usage, 2 data/format, 3 numeric failure.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Incompatible tensor shapes fed to an operation.
    #[error("{op}: dimension mismatch: {detail}")]
    Shape { op: &'static str, detail: String },

    /// An operation produced NaN or Inf. Training aborts on this.
    #[error("{op}: non-finite value in output{context}")]
    NonFinite { op: &'static str, context: String },

    /// Caller misuse of an API (bad argument ranges, non-scalar loss, ...).
    #[error("usage: {0}")]
    Usage(String),

    /// Inconsistent configuration (dimension bindings, variant requirements).
    #[error("config: {0}")]
    Config(String),

    /// Malformed or out-of-range input data; names the offending record.
    #[error("ingest: {0}")]
    Ingest(String),

    /// File parse failures (JSON, PNG, CSV) with file context.
    #[error("format: {0}")]
    Format(String),

    /// Metric not defined for the given inputs (e.g. constant targets).
    #[error("metric undefined: {0}")]
    UndefinedMetric(String),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Stable CLI exit code: 1 usage, 2 data/format, 3 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Usage(_) | Error::Config(_) | Error::Shape { .. } => 1,
            Error::Ingest(_) | Error::Format(_) | Error::UndefinedMetric(_) | Error::Io(_) => 2,
            Error::NonFinite { .. } => 3,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
