use std::fmt;

/// Errors raised by every fallible operation in this crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A caller broke an operation's precondition (shape, range, ordering).
    #[error("contract violation: {0}")]
    Contract(String),

    /// A computation produced a non-finite value or hit an unrecoverable
    /// numerical condition.
    #[error("numeric error in {op}: {detail}")]
    Numeric { op: String, detail: String },

    /// A file or serialized artifact failed validation.
    #[error("format error: {0}")]
    Format(String),

    /// An internal invariant was broken; always a bug.
    #[error("invariant violated: {0}")]
    Invariant(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn contract(msg: impl fmt::Display) -> Self {
        Error::Contract(msg.to_string())
    }

    pub(crate) fn numeric(op: impl fmt::Display, detail: impl fmt::Display) -> Self {
        Error::Numeric {
            op: op.to_string(),
            detail: detail.to_string(),
        }
    }

    pub(crate) fn format(msg: impl fmt::Display) -> Self {
        Error::Format(msg.to_string())
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Format(e.to_string())
    }
}

macro_rules! ensure {
    ($cond:expr, $($arg:tt)+) => {
        if !$cond {
            return Err($crate::error::Error::Contract(format!($($arg)+)));
        }
    };
}
pub(crate) use ensure;
