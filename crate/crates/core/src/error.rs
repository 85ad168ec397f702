use std::path::PathBuf;

use hd2s_tensor::{DomainTag, TensorError};
use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("cannot read {path}: {msg}")]
    Ingestion { path: PathBuf, msg: String },

    #[error("input error: {0}")]
    Input(String),

    #[error("mode error: {0}")]
    Mode(String),

    #[error("unknown domain {0}")]
    UnknownDomain(DomainTag),

    #[error("ground-truth map has no mass")]
    DegenerateTarget,

    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),

    #[error("unsupported checkpoint version {found} (expected {expected})")]
    CheckpointVersion { found: u32, expected: u32 },

    #[error("numerical failure: {0}")]
    NonFinite(String),

    #[error(transparent)]
    Tensor(TensorError),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl From<TensorError> for Error {
    fn from(e: TensorError) -> Self {
        match e {
            TensorError::UnknownDomain(d) => Error::UnknownDomain(d),
            other => Error::Tensor(other),
        }
    }
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn ingest(path: impl Into<PathBuf>, msg: impl ToString) -> Self {
        Error::Ingestion {
            path: path.into(),
            msg: msg.to_string(),
        }
    }
}
