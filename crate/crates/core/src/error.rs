use std::path::PathBuf;

use thiserror::Error;

/// Coarse classification used by front ends to map failures onto exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    /// Bad input data, malformed files, inconsistent dimensions.
    Data,
    /// Numerical breakdown during evaluation or training.
    Numeric,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("index {index} out of range for {what} (len {len})")]
    IndexOutOfRange { what: &'static str, index: usize, len: usize },

    #[error("degenerate covariance: {0}")]
    DegenerateCovariance(String),

    #[error("degenerate order variance {var}{}", describe_triple(.triple))]
    DegenerateVariance {
        var: f64,
        /// `(u, i, j)` of the offending triple when known.
        triple: Option<(usize, usize, usize)>,
    },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("{path}:{line}: {message}")]
    Parse { path: PathBuf, line: usize, message: String },

    #[error("empty dataset: {0}")]
    EmptyDataset(String),

    #[error("impossible split: {0}")]
    ImpossibleSplit(String),

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("no informative triple found after {0} draws")]
    NoInformativeTriples(usize),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::DegenerateCovariance(_)
            | Error::DegenerateVariance { .. }
            | Error::NonFinite(_)
            | Error::NoInformativeTriples(_) => ErrorKind::Numeric,
            _ => ErrorKind::Data,
        }
    }
}

fn describe_triple(t: &Option<(usize, usize, usize)>) -> String {
    match t {
        Some((u, i, j)) => format!(" for triple (u={u}, i={i}, j={j})"),
        None => String::new(),
    }
}

pub type Result<T> = std::result::Result<T, Error>;
