use std::path::PathBuf;

/// Errors produced anywhere in the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Malformed input document; `line` is 1-based.
    #[error("parse error at line {line}: {message}")]
    Parse { line: u32, message: String },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("codec error: {0}")]
    Codec(String),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// A network failure that may succeed if retried. Distinct from
    /// "imagery not available", which is a successful answer.
    #[error("transport error after {attempts} attempt(s): {message}")]
    Transport { attempts: u32, message: String },

    /// An operation was invoked out of order (e.g. backward before forward).
    #[error("state error: {0}")]
    State(String),

    /// A checkpoint could not be loaded or does not match the expected config.
    #[error("load error: {0}")]
    Load(String),

    #[error("correlation undefined: {0}")]
    UndefinedCorrelation(String),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }

    /// True for failures worth retrying (transport level).
    pub fn is_retryable(&self) -> bool {
        matches!(self, Error::Transport { .. })
    }
}
