use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("index error: {0}")]
    Index(String),

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("optimizer error: {0}")]
    Optimizer(String),

    #[error("{path}: line {line}: {msg}")]
    Parse { path: PathBuf, line: u64, msg: String },

    #[error("schema error: {0}")]
    Schema(String),

    #[error("split error: {0}")]
    Split(String),

    #[error("missingness injection error: {0}")]
    Injection(String),

    #[error("metric error: {0}")]
    Metric(String),

    #[error("training aborted at epoch {epoch}, batch {batch}: {msg}")]
    Training { epoch: usize, batch: usize, msg: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape { op, detail: detail.into() }
    }

    /// True for failures caused by input data or files rather than numerics.
    pub fn is_data_error(&self) -> bool {
        matches!(
            self,
            Error::Parse { .. }
                | Error::Schema(_)
                | Error::Split(_)
                | Error::Checkpoint(_)
                | Error::Config(_)
                | Error::Io(_)
                | Error::Csv(_)
                | Error::Json(_)
                | Error::Injection(_)
        )
    }
}
