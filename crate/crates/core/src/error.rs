//! Crate-wide error type.

use std::path::PathBuf;

/// Result alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

/// Errors produced by model construction, evaluation, training and I/O.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A vector or matrix dimension does not match its contract.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// An argument violates a precondition (non-positive scale, empty list, ...).
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A NaN or infinity appeared where a finite value is required.
    #[error("non-finite value in {0}")]
    NonFinite(String),

    /// Input is degenerate (all-identical walkers, constant training data, ...).
    #[error("degenerate input: {0}")]
    Degenerate(String),

    /// Configuration file is invalid.
    #[error("config error: {0}")]
    Config(String),

    /// An artifact on disk was produced under a different configuration.
    #[error("config hash mismatch: expected {expected}, found {found}")]
    HashMismatch { expected: String, found: String },

    /// The output directory is owned by another run.
    #[error("output directory locked: {0}")]
    Locked(PathBuf),

    /// A pipeline stage failed; the stage name is preserved for diagnostics.
    #[error("stage '{stage}' failed: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Wraps an error with the pipeline stage it occurred in.
    pub fn in_stage(self, stage: &str) -> Error {
        Error::Stage {
            stage: stage.to_string(),
            source: Box::new(self),
        }
    }
}
