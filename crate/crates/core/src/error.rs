use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("parse error in document `{doc}`: {message}")]
    Parse { doc: String, message: String },

    #[error("document `{doc}`: entity {entity} mention {mention}: {detail}")]
    MalformedMention {
        doc: String,
        entity: usize,
        mention: usize,
        detail: String,
    },

    #[error("unknown relation `{0}`")]
    UnknownRelation(String),

    #[error("unknown entity type `{0}`")]
    UnknownEntityType(String),

    #[error("invalid document `{doc}`: {message}")]
    InvalidDocument { doc: String, message: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("dimension mismatch for {what}: expected {expected}, found {found}")]
    Dimension {
        what: String,
        expected: usize,
        found: usize,
    },

    #[error("encoding error: {0}")]
    Encoding(String),

    #[error("bad file format in {path}: {message}")]
    Format { path: PathBuf, message: String },

    #[error("non-finite value produced by `{op}` during {stage}")]
    NonFinite { stage: &'static str, op: &'static str },

    #[error("training diverged at epoch {epoch} (loss {loss})")]
    Diverged { epoch: usize, loss: f64 },

    #[error("unknown document `{0}`")]
    UnknownDocument(String),

    #[error("empty input: {0}")]
    Empty(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
