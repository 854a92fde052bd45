use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("degenerate attention row at batch {batch}, head {head}, position {position} (row sum {sum:e})")]
    DegenerateRow {
        batch: usize,
        head: usize,
        position: usize,
        sum: f64,
    },

    #[error("stale stabilization shift: entry {value} exceeds shift {shift} by more than {limit}")]
    StaleShift { value: f64, shift: f64, limit: f64 },

    #[error("tape usage error: {0}")]
    Tape(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("input error: {0}")]
    Input(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("non-finite loss at step {step}: {detail}")]
    NonFiniteLoss { step: usize, detail: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
