use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("missing column `{0}` in case table header")]
    Schema(String),

    #[error("line {line}: {message}")]
    Row { line: u64, message: String },

    #[error("no records remain after cleaning")]
    EmptyPanel,

    #[error("fetch failed: {0}")]
    Fetch(String),

    #[error("basis of degree {degree} needs at least {} time points, got {t_count}", degree + 1)]
    Rank { degree: usize, t_count: usize },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("non-finite log-posterior at initialization in block `{0}`")]
    Initialization(&'static str),

    #[error("invalid state: {0}")]
    State(String),

    #[error("unknown parameter `{0}`")]
    Lookup(String),

    #[error("degenerate variance: {0} is constant")]
    DegenerateVariance(&'static str),

    #[error("malformed artifact {path}: {message}")]
    Artifact { path: PathBuf, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
