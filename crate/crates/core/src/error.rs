//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Attempted to L2-normalize a zero vector.
    #[error("cannot normalize a zero vector")]
    Normalization,

    /// Vector or matrix dimensions do not line up.
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    /// An identity with no member embeddings.
    #[error("identity has no member embeddings")]
    EmptyIdentity,

    /// Non-finite values produced during a numeric operation.
    #[error("numerical failure: {0}")]
    Numerical(String),

    /// A forward trace is replayed against parameters that have changed.
    #[error("stale forward trace: parameters were updated after the trace was recorded")]
    StaleTrace,

    /// Class label outside the classifier's range.
    #[error("label {label} out of range for {num_classes} classes")]
    Label { label: u32, num_classes: u32 },

    /// A sampling scope holds fewer eligible identities than the batch needs.
    #[error("scope too small: {available} eligible identities, {needed} needed")]
    ScopeTooSmall { needed: usize, available: usize },

    /// Invalid configuration value or combination.
    #[error("invalid config: {0}")]
    Config(String),

    /// Retrieval index with no members.
    #[error("retrieval index is empty")]
    EmptyIndex,

    /// Two indices that were expected to cover the same dataset do not.
    #[error("index mismatch: {0}")]
    IndexMismatch(String),

    /// Cleaning removed so much data that training is no longer possible.
    #[error("cleaning collapse: only {survivors} identities survived")]
    CleaningCollapse { survivors: usize },

    /// Malformed dataset, checkpoint, or index file.
    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
