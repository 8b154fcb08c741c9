//! Crate-wide error type.

use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, StylexError>;

#[derive(Debug, thiserror::Error)]
pub enum StylexError {
    /// Invalid configuration or rejected input values.
    #[error("config error: {0}")]
    Config(String),

    /// A caller violated an API contract (shape mismatch, out-of-range argument).
    #[error("contract violation: {0}")]
    Contract(String),

    /// Malformed file contents (bad magic, truncated payload, version mismatch).
    #[error("format error in {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    /// A stage was invoked before its prerequisite artifacts exist.
    #[error("staging error: {0}")]
    Staging(String),

    /// Training aborted on a non-finite loss; the snapshot path holds diagnostics.
    #[error("non-finite loss at step {step}: {detail}")]
    NonFiniteLoss { step: u64, detail: String },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("serialization error: {0}")]
    Serde(String),
}

impl StylexError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        StylexError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        StylexError::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }
}

impl From<serde_json::Error> for StylexError {
    fn from(e: serde_json::Error) -> Self {
        StylexError::Serde(e.to_string())
    }
}
