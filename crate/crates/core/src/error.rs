use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("wav {}: {detail}", path.display())]
    Wav { path: PathBuf, detail: String },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite value produced by {op} (tape node {node})")]
    NonFinite { op: &'static str, node: usize },

    #[error("model file: {0}")]
    Format(String),

    #[error("config: {0}")]
    Config(String),

    #[error("manifest: {0}")]
    Manifest(String),

    #[error("training diverged at epoch {epoch}, step {step}: {detail}")]
    Diverged {
        epoch: usize,
        step: usize,
        detail: String,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    /// Errors caused by user-supplied configuration or data layout rather
    /// than by a failure while running.
    pub fn is_validation(&self) -> bool {
        matches!(self, Error::Config(_) | Error::Manifest(_))
    }
}
