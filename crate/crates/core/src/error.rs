//! Error type shared across the crate.

/// Failure categories surfaced by the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Tensor or layer shapes do not line up.
    #[error("dimension error: {0}")]
    Dimension(String),
    /// An operation was called outside its contract.
    #[error("contract error: {0}")]
    Contract(String),
    /// A label or index is out of range.
    #[error("index error: {0}")]
    Index(String),
    /// Dataset ingestion failed.
    #[error("load error: {0}")]
    Load(String),
    /// A class cannot be split across the requested folds.
    #[error("stratification error: {0}")]
    Stratification(String),
    /// Checkpoint container is malformed or inconsistent.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
