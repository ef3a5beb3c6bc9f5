use thiserror::Error;

use crate::kvcache::KvVariant;

#[derive(Debug, Error)]
pub enum LpmError {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("softmax row {row} has no unmasked entry")]
    DegenerateRow { row: usize },

    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),

    #[error("config error: {0}")]
    Config(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("cache miss: chunk {chunk} layer {layer} ({variant:?})")]
    CacheMiss {
        chunk: usize,
        layer: usize,
        variant: KvVariant,
    },

    #[error("duplicate cache entry: chunk {chunk} layer {layer} ({variant:?})")]
    DuplicateEntry {
        chunk: usize,
        layer: usize,
        variant: KvVariant,
    },

    #[error("audio underrun at step {step}: have {have} samples, need {need}")]
    AudioUnderrun { step: usize, have: usize, need: usize },

    #[error("training diverged at step {step}: {detail}")]
    Diverged { step: usize, detail: String },

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("checkpoint format: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, LpmError>;

pub(crate) fn shape_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(LpmError::Shape(msg.into()))
}
