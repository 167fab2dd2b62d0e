//! Error types shared across the crate.

use std::path::PathBuf;

/// Crate-wide error type.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Invalid or inconsistent configuration (bad dims, unknown variant, missing model file).
    #[error("configuration error: {0}")]
    Config(String),

    /// Invalid runtime input (shape mismatch, unsupported channel count, empty set).
    #[error("input error: {0}")]
    Input(String),

    /// Dataset-level problem (empty folder, unreadable file).
    #[error("data error: {0}")]
    Data(String),

    /// I/O failure with the offending path attached.
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// Checkpoint container is corrupt, incompatible, or from a different format version.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// Training produced a non-finite loss; diagnostics attached.
    #[error("non-finite loss: {0}")]
    NonFinite(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
