use thiserror::Error;

use crate::autodiff::TensorError;
use crate::codec::CodecError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("invalid input: {0}")]
    Input(String),
    #[error("sequence of {len} tokens exceeds max_seq_len {limit}")]
    TooLong { len: usize, limit: usize },
    #[error("{path}: malformed record: {message}")]
    Malformed { path: String, message: String },
    #[error("example {id}: {message}")]
    Validation { id: String, message: String },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: usize },
    #[error("prediction ids: {0}")]
    PredictionIds(String),
}

impl Error {
    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    /// True for errors caused by bad user input rather than a runtime failure.
    pub fn is_validation(&self) -> bool {
        !matches!(self, Error::Io { .. } | Error::NonFiniteLoss { .. } | Error::Tensor(_))
    }
}

pub type Result<T> = std::result::Result<T, Error>;
