use std::io;

use bridgekit_tensor::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid shape spec: {0}")]
    InvalidSpec(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("dimension mismatch: {0}")]
    DimMismatch(String),
    #[error("empty input: {0}")]
    Empty(String),
    #[error("file format: {0}")]
    Format(String),
    #[error("missing checkpoint: {0}")]
    MissingCheckpoint(String),
    #[error("scan keeps {kept:.3} of the surface, below the bound {bound:.3}")]
    InsufficientCoverage { kept: f64, bound: f64 },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::InvalidArgument(msg.into()))
}
