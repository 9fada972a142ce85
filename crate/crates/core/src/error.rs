use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the crate.
///
/// The variants line up with the CLI exit codes: usage problems map to 1,
/// data and format problems to 2, numeric failures to 3.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("contract violated: {0}")]
    Contract(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("capacity exceeded: {needed} positions needed, {limit} allowed")]
    Capacity { needed: usize, limit: usize },
    #[error("format error: {0}")]
    Format(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for this failure class.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Numeric(_) => 3,
            Error::Data(_) | Error::Format(_) | Error::Io { .. } => 2,
            Error::Shape { .. } | Error::Contract(_) | Error::Capacity { .. } => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
