use thiserror::Error;

use crate::DomainTag;

pub type Result<T, E = TensorError> = std::result::Result<T, E>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: axis {axis} has extent {got}, expected {expected}")]
    Dimension {
        op: &'static str,
        axis: usize,
        expected: String,
        got: usize,
    },

    #[error("{op}: expected rank {expected}, got shape {shape:?}")]
    Rank {
        op: &'static str,
        expected: usize,
        shape: Vec<usize>,
    },

    #[error("{op}: {msg}")]
    Invalid { op: &'static str, msg: String },

    #[error("no batch-norm statistics recorded for domain {0}")]
    UnknownDomain(DomainTag),

    #[error("backward requires a scalar output, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
}

impl TensorError {
    pub(crate) fn dim(op: &'static str, axis: usize, expected: impl ToString, got: usize) -> Self {
        TensorError::Dimension {
            op,
            axis,
            expected: expected.to_string(),
            got,
        }
    }

    pub(crate) fn invalid(op: &'static str, msg: impl Into<String>) -> Self {
        TensorError::Invalid {
            op,
            msg: msg.into(),
        }
    }
}
