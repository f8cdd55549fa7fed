use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the pipeline.
#[derive(Debug, Error)]
pub enum AsdError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("not implemented: {0}")]
    NotImplemented(&'static str),

    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("format error: {0}")]
    Format(String),
}

pub type Result<T, E = AsdError> = std::result::Result<T, E>;

impl AsdError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        AsdError::Io {
            path: path.into(),
            source,
        }
    }
}

/// Shorthand for `Err(AsdError::InvalidArgument(..))` with `format!` syntax.
macro_rules! invalid {
    ($($arg:tt)*) => {
        $crate::error::AsdError::InvalidArgument(format!($($arg)*))
    };
}
pub(crate) use invalid;
