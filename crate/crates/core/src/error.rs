//! Crate-wide error type.

use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{op}: shape mismatch: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite value in {ctx}")]
    NonFinite { ctx: String },

    #[error("invalid argument: {0}")]
    InvalidArg(String),

    #[error("{path}: bad magic bytes, not a {expected} file")]
    BadMagic { path: PathBuf, expected: &'static str },

    #[error("{path}: truncated file ({detail})")]
    Truncated { path: PathBuf, detail: String },

    #[error("dimension overflow: {0}")]
    DimOverflow(String),

    #[error("calibration region exceeds sampling budget: {0}")]
    BudgetExceeded(String),

    #[error("solver diverged: {0}")]
    Diverged(String),

    #[error("loss must be scalar, got shape {0:?}")]
    NotScalar(Vec<usize>),

    #[error("config error: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
