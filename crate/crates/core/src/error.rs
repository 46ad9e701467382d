use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("numeric fault in `{op}` at {location}")]
    NumericFault { op: String, location: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("{what} hash mismatch: expected {expected:016x}, found {found:016x}")]
    HashMismatch {
        what: &'static str,
        expected: u64,
        found: u64,
    },

    #[error("decode error at byte {position}: {reason}")]
    Decode { position: usize, reason: String },

    #[error("training diverged at step {step}: loss {loss:.6e} above 10x running median {median:.6e} for {run} consecutive steps")]
    Diverged {
        step: usize,
        loss: f64,
        median: f64,
        run: usize,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Prefixes the location of a numeric fault; other errors pass through.
    pub fn at(self, context: impl std::fmt::Display) -> Self {
        match self {
            Error::NumericFault { op, location } => Error::NumericFault {
                op,
                location: format!("{context} > {location}"),
            },
            other => other,
        }
    }

    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub(crate) fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }
}
