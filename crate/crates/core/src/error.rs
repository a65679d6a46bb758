use std::path::PathBuf;

use thiserror::Error;

/// Shape and tape errors raised by the tensor engine.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TensorError {
    #[error("{op}: incompatible shapes {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("{op}: invalid shape {shape:?} ({reason})")]
    InvalidShape {
        op: &'static str,
        shape: Vec<usize>,
        reason: String,
    },
    #[error("data length {len} does not match shape {shape:?}")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error(
        "maxpool1d: length {len} is not divisible by window {window}; \
         choose a latent width divisible by 2^depth or reduce the depth"
    )]
    PoolLength { len: usize, window: usize },
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("backward already ran on this tape; start a new tape")]
    BackwardTwice,
    #[error("tape is empty")]
    EmptyTape,
}

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("data error in {context}: {message}")]
    Data { context: String, message: String },
    #[error("training diverged in {phase} at epoch {epoch}: {what} is not finite")]
    Diverged {
        phase: String,
        epoch: usize,
        what: &'static str,
    },
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("label length mismatch: predicted={predicted}, truth={truth}")]
    LabelLength { predicted: usize, truth: usize },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("json error in {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn data(context: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Data {
            context: context.into(),
            message: message.into(),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
