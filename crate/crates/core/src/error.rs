use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the restoration pipeline.
#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration or parameter combination.
    #[error("configuration error: {0}")]
    Config(String),
    /// A caller violated an operation's preconditions (shape mismatch, bad step index, ...).
    #[error("contract violation: {0}")]
    Contract(String),
    /// The sampler produced a non-finite state.
    #[error("numerical failure at frame {frame}, step t={t}: {what}")]
    Numerical { frame: usize, t: usize, what: String },
    /// Malformed or missing input data.
    #[error("input error in {path}: {msg}")]
    Input { path: PathBuf, msg: String },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub(crate) fn input(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Input {
            path: path.into(),
            msg: msg.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
