use std::path::PathBuf;

use thiserror::Error;

use crate::trainer::RrmTrace;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid causal model: {}", .0.join("; "))]
    InvalidScm(Vec<String>),

    #[error("time step {requested} is outside 1..={horizon}")]
    Horizon { requested: usize, horizon: usize },

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("state space of {size} trajectories exceeds the enumeration cap {cap}")]
    EnumerationCap { size: u128, cap: u128 },

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("csv {path}: {message}")]
    Csv { path: PathBuf, message: String },

    #[error("csv {path}, row {row}, column `{column}`: {message}")]
    CsvCell { path: PathBuf, row: usize, column: String, message: String },

    #[error("non-finite objective after {steps} inner steps")]
    NonFinite { steps: usize },

    #[error("repeated risk minimization diverged at outer iteration {iteration}")]
    Diverged { iteration: usize, trace: Box<RrmTrace> },

    #[error("{0}")]
    Refused(String),

    #[error("io error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
