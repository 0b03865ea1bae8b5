use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor or patch extents do not line up.
    #[error("shape error: {0}")]
    Shape(String),

    /// Invalid configuration value, unknown key, or bad geometry.
    #[error("configuration error: {0}")]
    Config(String),

    /// Malformed, truncated or mismatched on-disk data.
    #[error("data error: {0}")]
    Data(String),

    /// Network structure is inconsistent (pruning plans, checkpoints).
    #[error("structure error: {0}")]
    Structure(String),

    /// NaN/Inf encountered during training or a gradient step.
    #[error("numerical failure: {0}")]
    Numerical(String),

    /// Statistic is undefined for the given input (constant vectors, too few points).
    #[error("undefined statistic: {0}")]
    Undefined(String),

    #[error("i/o error on {path}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
}

impl Error {
    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }

    pub fn io(path: impl AsRef<std::path::Path>, source: io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    /// Process exit code: 1 usage/config, 2 data, 3 numerical.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 1,
            Error::Numerical(_) => 3,
            Error::Shape(_)
            | Error::Data(_)
            | Error::Structure(_)
            | Error::Undefined(_)
            | Error::Io { .. } => 2,
        }
    }
}
