use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("layout error: {0}")]
    Layout(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("non-finite value at index {index} of {context}")]
    NonFinite { context: String, index: usize },

    #[error("degenerate {what}: magnitude {magnitude:e} below threshold")]
    Degenerate { what: String, magnitude: f64 },

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("evaluation error: {0}")]
    Eval(String),

    #[error("training diverged at step {step}: {detail}")]
    Diverged { step: usize, detail: String },

    #[error("format error: {0}")]
    Format(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("unknown id: {0}")]
    UnknownId(String),

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: io::Error,
    },
}

/// Coarse error classes, used by the command-line tool to pick exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Validation,
    Io,
    Numerical,
}

impl Error {
    pub fn class(&self) -> ErrorClass {
        match self {
            Error::NonFinite { .. } | Error::Degenerate { .. } | Error::Diverged { .. } => ErrorClass::Numerical,
            Error::Io { .. } => ErrorClass::Io,
            _ => ErrorClass::Validation,
        }
    }

    pub(crate) fn io(context: impl Into<String>, source: io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }

    pub(crate) fn degenerate(what: impl Into<String>, magnitude: f64) -> Self {
        Error::Degenerate {
            what: what.into(),
            magnitude,
        }
    }
}

/// Returns an error naming the first non-finite entry of `v`.
pub(crate) fn check_finite(v: &[f64], context: &str) -> Result<()> {
    match v.iter().position(|x| !x.is_finite()) {
        Some(index) => Err(Error::NonFinite {
            context: context.to_string(),
            index,
        }),
        None => Ok(()),
    }
}
