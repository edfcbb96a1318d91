use std::path::PathBuf;

use thiserror::Error;

use crate::bitstream::StreamError;
use crate::metrics::BdError;
use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("codec error: {0}")]
    Codec(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error(transparent)]
    Stream(#[from] StreamError),
    #[error(transparent)]
    Bd(#[from] BdError),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("compatibility error: {0}")]
    Compat(String),
    #[error("training diverged at epoch {epoch}: {detail}")]
    Divergence { epoch: usize, detail: String },
    #[error("i/o error on {}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
}

/// Coarse error category, used for process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Data,
    Codec,
    Compat,
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Config(_) | Error::Checkpoint(_) => ErrorKind::Config,
            Error::Data(_) | Error::Io { .. } | Error::Image(_) => ErrorKind::Data,
            Error::Compat(_) => ErrorKind::Compat,
            Error::Stream(e) if e.is_compat() => ErrorKind::Compat,
            Error::Tensor(_)
            | Error::Codec(_)
            | Error::Stream(_)
            | Error::Bd(_)
            | Error::Divergence { .. } => ErrorKind::Codec,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
