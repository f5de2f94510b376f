use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("residual join requires identical branch shapes, got {left:?} and {right:?}")]
    ResidualMismatch { left: Vec<usize>, right: Vec<usize> },

    #[error("{op}: {msg}")]
    InvalidArgument { op: &'static str, msg: String },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("parameter `{0}` has no gradient")]
    MissingGradient(String),

    #[error("batchnorm running statistics were never initialized")]
    UninitializedStats,

    #[error("non-finite loss at epoch {epoch}, batch {batch}: {loss}")]
    NonFiniteLoss {
        epoch: usize,
        batch: usize,
        loss: f32,
    },

    #[error("channel inconsistency: {0}")]
    ChannelInconsistency(String),

    #[error("pruning: {0}")]
    Pruning(String),

    #[error("PLS did not converge after {iterations} iterations (component {component})")]
    PlsNoConvergence { component: usize, iterations: usize },

    #[error("malformed {format} data at byte offset {offset}: {msg}")]
    Format {
        format: &'static str,
        offset: u64,
        msg: String,
    },

    #[error("checkpoint {path}: {msg}")]
    Checkpoint { path: PathBuf, msg: String },

    #[error("config field `{field}`: {msg}")]
    Config { field: String, msg: String },

    #[error("{0} is undefined (zero variance)")]
    Undefined(&'static str),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn invalid(op: &'static str, msg: impl Into<String>) -> Error {
    Error::InvalidArgument {
        op,
        msg: msg.into(),
    }
}
