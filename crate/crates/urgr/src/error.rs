//! Error types shared across the crate.

use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// A caller-supplied value violated a precondition.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// No person was detected in the frame. Distinct from invalid input:
    /// the frame itself was fine, there was just nobody in it.
    #[error("no user found: {0}")]
    NoUserFound(String),

    /// A filter or selection produced an empty set where at least one
    /// element is required.
    #[error("empty set: {0}")]
    EmptySet(String),

    /// Training produced a non-finite loss.
    #[error("training diverged at epoch {epoch}: loss = {loss}")]
    TrainingDiverged { epoch: usize, loss: f64 },

    /// Checkpoint archive is malformed, corrupted, or of the wrong kind.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// A manifest row failed validation; `line` is 1-based.
    #[error("manifest line {line}: {msg}")]
    Manifest { line: usize, msg: String },

    /// An internal shape or state invariant was violated (a bug, not bad input).
    #[error("internal invariant violated: {0}")]
    Internal(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("image codec error: {0}")]
    Codec(#[from] image::ImageError),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    /// Stable machine-readable tag, used by the CLI error object and the FFI
    /// error codes.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidArgument(_) => "invalid_argument",
            Error::NoUserFound(_) => "no_user",
            Error::EmptySet(_) => "empty_set",
            Error::TrainingDiverged { .. } => "training_diverged",
            Error::Checkpoint(_) => "checkpoint",
            Error::Manifest { .. } => "manifest",
            Error::Internal(_) => "internal",
            Error::Io(_) => "io",
            Error::Codec(_) => "codec",
            Error::Json(_) => "json",
        }
    }
}
