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

    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },

    #[error("{0}")]
    Json(#[from] serde_json::Error),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("mask row {row} is empty (all values zero)")]
    EmptyMask { row: usize },

    #[error("vocabulary has {expected} categories but embeddings have {found}")]
    VocabSize { expected: usize, found: usize },

    #[error(
        "text embeddings were built for a different vocabulary (hash {found}, expected {expected})"
    )]
    VocabHash { expected: String, found: String },

    #[error("checkpoint config digest {found} does not match expected {expected}")]
    DigestMismatch { expected: String, found: String },

    #[error("checkpoint tensor '{name}': {message}")]
    Tensor { name: String, message: String },

    #[error("training diverged at step {step}: loss is not finite")]
    Diverged { step: usize },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            message: message.into(),
        }
    }
}
