//! Crate-wide error type.
//!
//! Every failure carries a stable category string so callers (notably the CLI)
//! can map errors to machine-readable classes without matching on variants.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes are incompatible for the requested operation.
    #[error("dimension error in {op}: {msg}")]
    Dimension { op: &'static str, msg: String },

    /// An operation produced or consumed a NaN/Inf value.
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    /// An API was called in a mode or lifecycle phase that forbids it.
    #[error("state error: {0}")]
    State(String),

    /// A caller-visible precondition was violated.
    #[error("contract error: {0}")]
    Contract(String),

    /// Input data is well-formed but semantically invalid.
    #[error("data error: {0}")]
    Data(String),

    /// A file could not be decoded. `offset` is the byte position where
    /// decoding failed, when known.
    #[error("parse error in {path} at byte {offset}: {msg}")]
    Parse {
        path: String,
        offset: u64,
        msg: String,
    },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    /// Training diverged (loss became non-finite) at the given epoch.
    #[error("training diverged at epoch {epoch}")]
    Diverged { epoch: usize },
}

impl Error {
    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub fn state(msg: impl Into<String>) -> Self {
        Error::State(msg.into())
    }

    pub fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }

    /// Stable category label for exit-code mapping and reports.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Dimension { .. } => "dimension",
            Error::NonFinite { .. } => "nonfinite",
            Error::State(_) => "state",
            Error::Contract(_) => "contract",
            Error::Data(_) => "data",
            Error::Parse { .. } => "parse",
            Error::Io(_) => "io",
            Error::Diverged { .. } => "diverged",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
