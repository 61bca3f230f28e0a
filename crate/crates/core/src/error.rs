use std::path::PathBuf;

/// Errors raised across the segmentation engine.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A caller broke an operation's preconditions (shapes, ranks, channel counts).
    #[error("contract violation: {0}")]
    Contract(String),

    /// Backward was requested on a tape that has already been consumed.
    #[error("tape already consumed by a previous backward pass")]
    TapeConsumed,

    /// The loss handed to backward does not live on this tape.
    #[error("loss is detached from this tape")]
    Detached,

    /// NaN or infinite values in a loss or gradient.
    #[error("numerical failure: {0}")]
    Numerical(String),

    /// Malformed or unsupported file contents.
    #[error("format error in {path}: {msg}")]
    Format { path: PathBuf, msg: String },

    /// Invalid configuration value.
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            msg: msg.into(),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
