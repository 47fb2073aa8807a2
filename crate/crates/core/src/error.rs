use std::io;

use thiserror::Error;

/// Errors produced anywhere in the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("data error: {0}")]
    Data(String),

    #[error("range error: {0}")]
    Range(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("invalid state: {0}")]
    State(String),

    #[error("geometry error: {0}")]
    Geometry(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("provider error: {0}")]
    Provider(String),

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("cache miss: {0}")]
    CacheMiss(String),

    #[error("metric error: {0}")]
    Metric(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn arg(msg: impl Into<String>) -> Self {
        Error::Argument(msg.into())
    }

    /// Prefixes the message with `ctx`, keeping the variant.
    pub fn context(self, ctx: impl std::fmt::Display) -> Self {
        match self {
            Error::Parse { line, msg } => Error::Parse { line, msg: format!("{ctx}: {msg}") },
            Error::Data(m) => Error::Data(format!("{ctx}: {m}")),
            Error::Range(m) => Error::Range(format!("{ctx}: {m}")),
            Error::Argument(m) => Error::Argument(format!("{ctx}: {m}")),
            Error::State(m) => Error::State(format!("{ctx}: {m}")),
            Error::Geometry(m) => Error::Geometry(format!("{ctx}: {m}")),
            Error::Numeric(m) => Error::Numeric(format!("{ctx}: {m}")),
            Error::Provider(m) => Error::Provider(format!("{ctx}: {m}")),
            Error::Protocol(m) => Error::Protocol(format!("{ctx}: {m}")),
            Error::CacheMiss(m) => Error::CacheMiss(format!("{ctx}: {m}")),
            Error::Metric(m) => Error::Metric(format!("{ctx}: {m}")),
            Error::Io(e) => Error::Io(io::Error::new(e.kind(), format!("{ctx}: {e}"))),
            Error::Json(e) => Error::Data(format!("{ctx}: {e}")),
        }
    }
}
