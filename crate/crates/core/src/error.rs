use thiserror::Error;

use crate::nfcore::checkpoint::Checkpoint;

/// Errors produced anywhere in the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid shape: {0}")]
    InvalidShape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Statistics probes on models without running statistics (NF, IN).
    #[error("unsupported probe: {0}")]
    UnsupportedProbe(String),

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    /// Training produced a NaN/inf loss. The last checkpoint taken before the
    /// failure is carried along so the caller can keep it.
    #[error("training diverged at epoch {epoch}, step {step}: loss = {loss}")]
    Diverged {
        epoch: usize,
        step: usize,
        loss: f64,
        last_good: Option<Box<Checkpoint>>,
    },

    #[error("checkpoint format: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn shape_err(msg: impl Into<String>) -> Error {
    Error::InvalidShape(msg.into())
}

pub(crate) fn arg_err(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
