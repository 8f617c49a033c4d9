use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("line {line}: {message}")]
    Record { line: usize, message: String },

    #[error("duplicate commit_id {0}")]
    DuplicateCommit(String),

    #[error("invalid split: {0}")]
    Split(String),

    #[error("manifest ids absent from corpus: {}", .0.join(", "))]
    MissingIds(Vec<String>),

    #[error("git: {0}")]
    Git(String),

    #[error("{0}")]
    InvalidInput(String),

    #[error("invalid configuration: {}", .0.join("; "))]
    Config(Vec<String>),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("missing expert features for commits: {}", .0.join(", "))]
    MissingFeatures(Vec<String>),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }
}
