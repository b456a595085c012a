use std::path::PathBuf;

use thiserror::Error;

/// Errors raised by the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, found {found}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("index {index} out of range for {len} training points")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("model error: {0}")]
    Model(String),

    #[error(
        "dense operator storage needs {required} scalars but the budget is {budget}; \
         use the lazy storage policy instead"
    )]
    BudgetExceeded { required: usize, budget: usize },

    #[error("operators do not match the model: {0}")]
    Contract(String),

    #[error("no Taylor order up to {max_order} meets the requested accuracy (best bound {best_bound:e})")]
    BoundUnsatisfiable { max_order: usize, best_bound: f64 },

    #[error("operator cache: {0}")]
    Cache(String),

    #[error("config: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn csv(path: impl Into<PathBuf>, source: csv::Error) -> Self {
        Error::Csv {
            path: path.into(),
            source,
        }
    }
}

pub(crate) fn check_dim(context: &'static str, expected: usize, found: usize) -> Result<()> {
    if expected == found {
        Ok(())
    } else {
        Err(Error::DimensionMismatch {
            context,
            expected,
            found,
        })
    }
}
