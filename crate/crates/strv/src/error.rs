//! Crate error type, grouped so callers can map failures onto exit codes.

use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Malformed or rejected configuration.
    #[error("config error: {0}")]
    Config(String),

    /// Input data cannot be decoded or is missing.
    #[error("input error: {0}")]
    Input(String),

    /// A video decoded to zero frames.
    #[error("empty video: {0}")]
    EmptyVideo(String),

    /// An operation precondition was violated by the caller or by corrupt data.
    #[error("contract violation: {0}")]
    Contract(String),

    /// Binary artifact does not match the expected format.
    #[error("format error in {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    /// Artifact was produced under a different configuration.
    #[error("config mismatch for {path}: artifact hash {found:016x}, expected {expected:016x}")]
    ConfigMismatch {
        path: PathBuf,
        found: u64,
        expected: u64,
    },

    /// A pipeline stage ran before its inputs exist.
    #[error("pipeline order: {0}")]
    PipelineOrder(String),

    /// Lookup of an id that is not present in an index or manifest.
    #[error("unknown id: {0}")]
    UnknownId(String),

    /// Non-finite values produced by numeric code.
    #[error("numeric failure: {0}")]
    Numeric(String),

    /// Post-processing collapsed an embedding to the zero vector.
    #[error("degenerate embedding for video {0}")]
    DegenerateEmbedding(String),

    /// No valid negative exists in a mini-batch for some anchor.
    #[error("mining error: no valid negative for anchor {0}")]
    Mining(String),

    /// Another process holds the cache lock.
    #[error("cache locked: {0}")]
    Locked(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

/// Coarse category used by the command-line surface for exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorCategory {
    /// Misuse: bad flags, bad config (exit 1).
    Usage,
    /// Bad or missing data (exit 2).
    Data,
    /// Numeric failure (exit 3).
    Numeric,
}

impl Error {
    pub fn category(&self) -> ErrorCategory {
        match self {
            Error::Config(_) => ErrorCategory::Usage,
            Error::Numeric(_) | Error::DegenerateEmbedding(_) => ErrorCategory::Numeric,
            _ => ErrorCategory::Data,
        }
    }
}
