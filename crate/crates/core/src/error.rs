use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    #[error("non-finite value {value} produced by {op} at flat index {index}")]
    NonFinite {
        op: &'static str,
        index: usize,
        value: f64,
    },

    #[error("index error in {op}: {detail}")]
    Index { op: &'static str, detail: String },

    #[error("parameter error: {0}")]
    Parameter(String),

    #[error("capacity error: {0}")]
    Capacity(String),

    #[error("vocabulary error: unknown symbol {0:?}")]
    Vocabulary(String),

    #[error("configuration error: {0}")]
    Configuration(String),

    #[error("invalid configuration:\n  {}", .0.join("\n  "))]
    Validation(Vec<String>),

    #[error("parse error: {0}")]
    Parse(String),

    #[error("integrity error in {path}: {detail}")]
    Integrity { path: PathBuf, detail: String },

    #[error("empty data: {0}")]
    EmptyData(String),

    #[error("argument error: {0}")]
    Argument(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
