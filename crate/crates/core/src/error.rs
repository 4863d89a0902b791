use std::path::PathBuf;

use thiserror::Error;

/// Errors raised across the segmentation pipeline.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor extents are incompatible with the requested operation.
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    /// A documented precondition was violated by the caller.
    #[error("contract violation: {0}")]
    Contract(String),

    /// Invalid configuration value or combination.
    #[error("configuration error: {0}")]
    Config(String),

    /// Phantom generation could not satisfy its construction constraints.
    #[error("generation failed: {0}")]
    Generation(String),

    /// A loss became non-finite during training.
    #[error("training diverged at epoch {epoch}, batch {batch}: {what} is not finite")]
    Diverged {
        epoch: usize,
        batch: usize,
        what: &'static str,
    },

    /// Malformed file contents.
    #[error("invalid {kind} file {path}: {detail}")]
    Format {
        kind: &'static str,
        path: PathBuf,
        detail: String,
    },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by user-provided configuration rather than
    /// runtime failures.
    pub fn is_config(&self) -> bool {
        matches!(self, Error::Config(_))
    }
}

pub type Result<T> = std::result::Result<T, Error>;
