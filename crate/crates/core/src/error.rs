use std::path::PathBuf;

use thiserror::Error;

use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),

    #[error("invalid model config: {}", .0.join("; "))]
    InvalidConfig(Vec<String>),

    #[error("frame-capacity mismatch: model holds {capacity} frames, input has {got}")]
    FrameCapacity { capacity: usize, got: usize },

    #[error("unclassifiable parameter name `{0}`")]
    Unclassifiable(String),

    #[error("missing tensor `{0}`")]
    MissingTensor(String),

    #[error("unexpected tensor `{0}`")]
    UnexpectedTensor(String),

    #[error("tensor `{name}` has shape {got:?}, expected {expected:?}")]
    TensorShape { name: String, expected: Vec<usize>, got: Vec<usize> },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("surgery: {0}")]
    Surgery(String),

    #[error("checkpoint parse error at byte {offset}: {msg}")]
    Parse { offset: u64, msg: String },

    #[error("checkpoint {0} is locked by another writer")]
    Locked(PathBuf),

    #[error("non-finite value at sampling step {step}")]
    SamplingNonFinite { step: usize },

    #[error("non-finite loss at step {step} (batch seed {batch_seed})")]
    NonFiniteLoss { step: u64, batch_seed: u64 },

    #[error("{context}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },

    #[error("{context}")]
    Json {
        context: String,
        #[source]
        source: serde_json::Error,
    },

    #[error("{context}")]
    Csv {
        context: String,
        #[source]
        source: csv::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn io_err(context: impl Into<String>) -> impl FnOnce(std::io::Error) -> Error {
    let context = context.into();
    move |source| Error::Io { context, source }
}
