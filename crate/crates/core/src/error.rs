use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the engine.
#[derive(Debug, Error)]
pub enum Error {
    /// Two operands disagree on shape, or a shape is malformed.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// An operation's precondition was violated by its input values.
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    /// A configuration field holds an unusable value.
    #[error("invalid config field `{field}`: {message}")]
    Config { field: String, message: String },

    /// A binary or text file does not follow its declared layout.
    #[error("format error in {path} at byte {offset}: {message}")]
    Format {
        path: PathBuf,
        offset: u64,
        message: String,
    },

    /// The API was driven in the wrong order (e.g. backward with no forward).
    #[error("usage error: {0}")]
    Usage(String),

    /// A checkpoint's tensors do not fit the configuration it is loaded with.
    #[error("checkpoint mismatch: {0}")]
    Mismatch(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub(crate) fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
