use std::path::PathBuf;

use thiserror::Error;

/// Errors raised by the numeric engine, the model pipeline and the I/O layers.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("unknown token {word:?}; vocabulary is [{}]", vocabulary.join(", "))]
    Vocabulary { word: String, vocabulary: Vec<String> },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("format error: {0}")]
    Format(String),

    #[error("training diverged at step {step}: loss is {loss}")]
    Training { step: usize, loss: f64 },

    #[error("invariant violated: {0}")]
    Invariant(String),

    #[error("config error: {0}")]
    Config(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for this error class: 1 usage, 2 I/O, 3 numeric or invariant failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Io { .. } | Error::Format(_) => 2,
            Error::Numeric(_) | Error::Training { .. } | Error::Invariant(_) => 3,
            Error::Dimension(_) | Error::Contract(_) | Error::Vocabulary { .. } | Error::Config(_) => 1,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn dim_err(msg: impl Into<String>) -> Error {
    Error::Dimension(msg.into())
}

pub(crate) fn contract(msg: impl Into<String>) -> Error {
    Error::Contract(msg.into())
}
