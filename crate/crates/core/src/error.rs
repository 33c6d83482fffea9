use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape mismatch: expected {expected}, got {actual}")]
    Shape { expected: usize, actual: usize },

    #[error("idx parse error at byte offset {offset}: {reason}")]
    Parse { offset: usize, reason: String },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("corrupt payload: {0}")]
    CorruptPayload(String),

    #[error("aggregation error: {0}")]
    Aggregation(String),

    #[error("attack error: {0}")]
    Attack(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
