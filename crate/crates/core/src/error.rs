use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("line {line}: {message}")]
    Malformed { line: usize, message: String },

    #[error("duplicate doc_id {0:?}")]
    DuplicateDocId(String),

    #[error("unknown doc_id {0:?}")]
    UnknownDoc(String),

    #[error("unknown query_id {0:?}")]
    UnknownQuery(String),

    #[error("precondition failed: {0}")]
    Precondition(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("dimension mismatch for {id:?}: expected {expected}, got {actual}")]
    Dimension {
        id: String,
        expected: usize,
        actual: usize,
    },

    #[error("stale index: {0}")]
    StaleIndex(String),

    #[error("{stage} index has not been built")]
    MissingIndex { stage: &'static str },

    /// Retryable failure talking to an external model service.
    #[error("transport error: {0}")]
    Transport(String),

    /// The external service answered, but the answer broke the protocol contract.
    #[error("protocol violation: {0}")]
    Protocol(String),

    #[error("service error ({code}): {message}")]
    Remote { code: String, message: String },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn is_retryable(&self) -> bool {
        matches!(self, Error::Transport(_))
    }

    /// Whether the failure originated in the external model service link.
    pub fn is_transport(&self) -> bool {
        matches!(
            self,
            Error::Transport(_) | Error::Protocol(_) | Error::Remote { .. }
        )
    }

    /// Whether the failure is a problem with the user's input or configuration.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Malformed { .. }
                | Error::DuplicateDocId(_)
                | Error::UnknownDoc(_)
                | Error::UnknownQuery(_)
                | Error::Precondition(_)
                | Error::Config(_)
                | Error::Dimension { .. }
                | Error::StaleIndex(_)
                | Error::Json(_)
        )
    }
}
