use thiserror::Error;

/// Errors produced by the numerical core, the data readers and the model format.
#[derive(Debug, Error)]
pub enum KlrError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("validation failed: {0}")]
    Validation(String),

    #[error("dense size cap exceeded: n = {n} > cap = {cap}")]
    DenseCapExceeded { n: usize, cap: usize },

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("model format error: {0}")]
    Format(String),

    #[error("training diverged: {0}")]
    Diverged(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = KlrError> = std::result::Result<T, E>;
