use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the reformulation pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("query is empty after normalization")]
    EmptyQuery,

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("token id {id} is out of range for a vocabulary of size {vocab_size}")]
    VocabMismatch { id: u32, vocab_size: usize },

    #[error("malformed model input: {0}")]
    MalformedInput(String),

    #[error("input of {len} tokens exceeds the model limit of {max}")]
    InputTooLong { len: usize, max: usize },

    #[error("training diverged at epoch {epoch}, step {step}")]
    Diverged { epoch: usize, step: usize },

    #[error("generated span is empty")]
    EmptySpan,

    #[error("position {position} is out of range for a query of {len} words")]
    Index { position: usize, len: usize },

    #[error("duplicate document id `{0}`")]
    DuplicateDocument(String),

    #[error("evaluation requires at least one case")]
    EmptyEvaluation,

    #[error("corrupt fixture: {0}")]
    CorruptFixture(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
