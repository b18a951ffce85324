use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = LdpError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum LdpError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: not an LDP artifact")]
    NotArtifact { path: PathBuf },

    #[error("{path}: payload length mismatch (header declares {declared} bytes, file has {actual})")]
    PayloadLengthMismatch {
        path: PathBuf,
        declared: usize,
        actual: usize,
    },

    #[error("{path}: malformed artifact header: {reason}")]
    BadHeader { path: PathBuf, reason: String },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("training diverged: {0}")]
    Divergence(String),

    #[error("image error: {0}")]
    Image(String),

    #[error("empty input: {0}")]
    Empty(String),

    #[error("undefined: {0}")]
    Undefined(String),

    #[error("artifact kind mismatch: expected {expected:?}, found {found:?}")]
    KindMismatch { expected: String, found: String },
}

impl LdpError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        LdpError::Io {
            path: path.into(),
            source,
        }
    }
}
