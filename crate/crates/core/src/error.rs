use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in layer {layer} ({kind}): {detail}")]
    Shape {
        layer: usize,
        kind: &'static str,
        detail: String,
    },
    #[error("length mismatch: expected {expected}, got {actual}")]
    Length { expected: usize, actual: usize },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("matrix is not symmetric: max |H - H^T| = {0:e}")]
    NotSymmetric(f64),
    #[error("non-finite value encountered: {0}")]
    NonFinite(String),
    #[error(
        "Hessian dimension {params} exceeds cap {cap}; use a smaller rate-estimation model \
         or raise `pruning.hessian_cap`"
    )]
    HessianCap { params: usize, cap: usize },
    #[error("empty {0}")]
    Empty(&'static str),
    #[error("infeasible partition: {0}")]
    Partition(String),
    #[error("config error at `{key}`: {message}")]
    Config { key: String, message: String },
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error: {0}")]
    Parse(String),
}

impl Error {
    pub fn config(key: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            message: message.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Stable machine-readable category, used by the CLI error record and
    /// the C status codes.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Shape { .. } | Error::Length { .. } => "shape",
            Error::InvalidArgument(_) => "invalid_argument",
            Error::NotSymmetric(_) | Error::NonFinite(_) => "numeric",
            Error::HessianCap { .. } => "hessian_cap",
            Error::Empty(_) => "empty",
            Error::Partition(_) => "partition",
            Error::Config { .. } => "config",
            Error::Io { .. } => "io",
            Error::Parse(_) => "parse",
        }
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Parse(e.to_string())
    }
}
