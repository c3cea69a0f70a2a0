use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the solver, the oracles and the experiment front end.
#[derive(Debug, Error)]
pub enum Error {
    /// A caller violated an operation's preconditions.
    #[error("usage error: {0}")]
    Usage(String),

    /// A value overflowed or became NaN while evaluating `context`.
    #[error("non-finite value in {context}")]
    NonFiniteValue { context: String },

    /// Training diverged; `residual` names the first non-finite loss term.
    #[error("training aborted at epoch {epoch}: non-finite residual `{residual}`")]
    TrainingAborted { epoch: usize, residual: String },

    /// An integration left the finite range or crossed the divergence bound.
    #[error("integration diverged at t = {time}: {reason}")]
    Divergence { time: f64, reason: String },

    /// A Newton projection onto a constraint set did not converge.
    #[error("projection failed: {0}")]
    Projection(String),

    #[error("not implemented: {0}")]
    NotImplemented(String),

    /// Invalid configuration; `key` is the dotted path of the offending entry.
    #[error("config error at `{key}`: {message}")]
    Config { key: String, message: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    /// Process exit status: 3 for configuration and usage problems, 2 for
    /// failures during training or evaluation.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config { .. } | Error::Usage(_) | Error::Io { .. } => 3,
            _ => 2,
        }
    }

    pub(crate) fn usage(msg: impl Into<String>) -> Self {
        Error::Usage(msg.into())
    }

    pub(crate) fn config(key: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
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

pub type Result<T> = std::result::Result<T, Error>;
