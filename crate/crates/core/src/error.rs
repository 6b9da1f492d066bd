use std::io;

use thiserror::Error;

/// Error type shared by every module of the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("numeric error: {message}{}", .iteration.map(|i| format!(" (iteration {i})")).unwrap_or_default())]
    Numeric {
        message: String,
        iteration: Option<usize>,
    },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("bundle error: {message} (datasets {datasets:?})")]
    Bundle { message: String, datasets: Vec<u64> },

    #[error("registry error: {0}")]
    Registry(String),

    #[error("job error: {0}")]
    Job(String),

    #[error("lineage error: {0}")]
    Lineage(String),

    #[error("storage error: {0}")]
    Storage(String),

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("framing error: {0}")]
    Framing(String),

    #[error("state error: {0}")]
    State(String),

    #[error("comparison error: {0}")]
    Comparison(String),

    #[error("kernel `{kernel}` failed: {message}")]
    Kernel { kernel: String, message: String },

    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub fn numeric(message: impl Into<String>) -> Self {
        Error::Numeric {
            message: message.into(),
            iteration: None,
        }
    }

    pub fn numeric_at(message: impl Into<String>, iteration: usize) -> Self {
        Error::Numeric {
            message: message.into(),
            iteration: Some(iteration),
        }
    }

    /// Attach an iteration index to a numeric error; other variants pass through.
    pub fn at_iteration(self, iteration: usize) -> Self {
        match self {
            Error::Numeric { message, .. } => Error::Numeric {
                message,
                iteration: Some(iteration),
            },
            other => other,
        }
    }
}

macro_rules! shape_err {
    ($($arg:tt)*) => {
        $crate::error::Error::Shape(format!($($arg)*))
    };
}
pub(crate) use shape_err;
