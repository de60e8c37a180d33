//! Error type shared across the crate.
//!
//! Variants map onto process exit codes: config errors exit 2, data and
//! contract errors exit 3, numeric errors exit 4.

use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, QkiError>;

#[derive(Debug, thiserror::Error)]
pub enum QkiError {
    /// Invalid or inconsistent configuration (bad key, bad value, bad schedule).
    #[error("config error: {0}")]
    Config(String),

    /// Vector or matrix dimensions do not match what an operation expects.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// Bad on-disk data: wrong magic, truncated file, index out of range,
    /// dimension drift, value outside the storable range.
    #[error("data error: {0}")]
    Data(String),

    /// I/O failure, annotated with the path involved.
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },

    /// Non-finite values where finite arithmetic is required.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// An internal invariant was violated (stale store tag, cache/params
    /// mismatch, frozen-side misuse).
    #[error("contract violation: {0}")]
    Contract(String),
}

impl QkiError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        QkiError::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the CLI: 0 success, 2 config, 3 data, 4 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            QkiError::Config(_) => 2,
            QkiError::Numeric(_) => 4,
            _ => 3,
        }
    }
}
