use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("allocation error: {0}")]
    Alloc(String),

    #[error("config error at `{key}`: {msg}")]
    Config { key: String, msg: String },

    #[error("mining error: {0}")]
    Mining(String),

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("decode error in {path}: {msg}")]
    Decode { path: PathBuf, msg: String },

    #[error("split error: {0}")]
    Split(String),

    #[error("metrics error: {0}")]
    Metrics(String),

    #[error("checkpoint version {found} is not supported (expected {expected})")]
    Migration { found: u32, expected: u32 },

    #[error("checkpoint corrupted: {0}")]
    Corruption(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn config(key: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            msg: msg.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn decode(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Decode {
            path: path.into(),
            msg: msg.into(),
        }
    }

    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Io { .. } | Error::Decode { .. } => 2,
            Error::Numeric(_) | Error::Domain(_) => 3,
            _ => 1,
        }
    }
}
