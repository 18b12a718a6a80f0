use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid model structure: {0}")]
    InvalidStructure(String),

    #[error("dimension mismatch: {what} is {actual}, expected {expected}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error(
        "conservation violated at iteration {iter}, layer {layer}: row sums to {actual}, expected {expected}"
    )]
    Conservation {
        iter: usize,
        layer: usize,
        expected: u64,
        actual: u64,
    },

    #[error("empty {0}")]
    Empty(&'static str),

    #[error("index out of range: {0}")]
    OutOfRange(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("missing key `{key}` in {path}")]
    MissingKey { path: PathBuf, key: String },

    #[error("no stable point found: {0}")]
    NoStablePoint(String),

    #[error("training diverged at iteration {iter}: loss is {loss}")]
    Divergence { iter: usize, loss: f64 },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("expert {expert} carries load {load} but is missing from the placement of layer {layer}")]
    MissingFromPlacement {
        layer: usize,
        expert: usize,
        load: u64,
    },

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },

    #[error("{context}: {source}")]
    Json {
        context: String,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub(crate) fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidParameter(msg.into())
    }

    /// True for errors caused by bad input rather than by a failing computation.
    pub fn is_usage(&self) -> bool {
        !matches!(
            self,
            Error::NoStablePoint(_) | Error::Divergence { .. } | Error::NonFinite(_)
        )
    }
}
