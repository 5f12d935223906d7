//! Crate-wide error type. Every fallible path returns `Result<T>` with a
//! variant that names the operation and the offending values.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, GraftError>;

#[derive(Error, Debug)]
pub enum GraftError {
    /// Tensor shapes incompatible with the requested operation.
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: String, detail: String },

    /// A dimension constraint was violated (divisibility, kernel vs. input, rank).
    #[error("dimension error in {op}: {detail}")]
    Dimension { op: String, detail: String },

    /// An op produced NaN or Inf; these never propagate silently.
    #[error("non-finite value produced by {op}")]
    NonFinite { op: String },

    /// Batch statistics are undefined (fewer than two elements per channel).
    #[error("degenerate batch in {op}: {detail}")]
    DegenerateBatch { op: String, detail: String },

    /// Misuse of the autodiff tape (double backward, non-scalar loss, ...).
    #[error("autodiff error: {0}")]
    Autodiff(String),

    /// Cross-attention was asked for more positions than the configured cap.
    #[error("attention capacity exceeded: {positions} positions > cap {cap}")]
    AttentionCap { positions: usize, cap: usize },

    /// Input values outside the documented domain (e.g. mask not binary).
    #[error("domain error in {op}: {detail}")]
    Domain { op: String, detail: String },

    /// Bad configuration value or unparseable config file.
    #[error("config error: {0}")]
    Config(String),

    /// Checkpoint directory inconsistent with the model being restored.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// A file failed to parse; the message names the file.
    #[error("failed to parse {path}: {detail}")]
    Parse { path: String, detail: String },

    /// I/O failure annotated with the path involved.
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    /// Training aborted on a non-finite loss; reports the step and breakdown.
    #[error("training aborted at step {step}: non-finite loss ({breakdown})")]
    NanLoss { step: usize, breakdown: String },
}

impl GraftError {
    pub fn shape(op: &str, detail: impl Into<String>) -> Self {
        GraftError::ShapeMismatch { op: op.to_string(), detail: detail.into() }
    }

    pub fn dim(op: &str, detail: impl Into<String>) -> Self {
        GraftError::Dimension { op: op.to_string(), detail: detail.into() }
    }

    pub fn domain(op: &str, detail: impl Into<String>) -> Self {
        GraftError::Domain { op: op.to_string(), detail: detail.into() }
    }

    pub fn io(path: &std::path::Path, source: std::io::Error) -> Self {
        GraftError::Io { path: path.display().to_string(), source }
    }

    pub fn parse(path: &std::path::Path, detail: impl Into<String>) -> Self {
        GraftError::Parse { path: path.display().to_string(), detail: detail.into() }
    }
}
