use std::path::PathBuf;

use intra_tensor::TensorError;
use thiserror::Error;

pub type Result<T, E = IntraError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum IntraError {
    #[error(transparent)]
    Tensor(#[from] TensorError),

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("config: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Image {
        path: PathBuf,
        source: image::ImageError,
    },

    #[error("dataset: {0}")]
    Dataset(String),

    #[error("checkpoint: {reason} (byte offset {offset})")]
    Checkpoint { offset: u64, reason: String },

    #[error("checkpoint has no `{0}` section")]
    MissingSection(&'static str),

    #[error("non-finite training loss at epoch {epoch}, step {step}: {detail}")]
    NonFiniteLoss {
        epoch: usize,
        step: usize,
        detail: String,
    },
}

impl IntraError {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        IntraError::Invalid(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        IntraError::Io {
            path: path.into(),
            source,
        }
    }

    /// Short stable identifier used in machine-readable error lines.
    pub fn kind(&self) -> &'static str {
        match self {
            IntraError::Tensor(_) => "tensor",
            IntraError::Invalid(_) => "invalid",
            IntraError::Config(_) => "config",
            IntraError::Io { .. } => "io",
            IntraError::Image { .. } => "image",
            IntraError::Dataset(_) => "dataset",
            IntraError::Checkpoint { .. } => "checkpoint",
            IntraError::MissingSection(_) => "missing-section",
            IntraError::NonFiniteLoss { .. } => "non-finite-loss",
        }
    }
}
