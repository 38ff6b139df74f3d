use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {context}: expected {expected}, got {actual}")]
    Shape {
        context: &'static str,
        expected: String,
        actual: String,
    },

    #[error("invalid input: {0}")]
    Validation(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    /// Every training sample fell on the same side of the tail region, so the
    /// outlier gate cannot be learned.
    #[error(
        "outlier labels are single-class ({n_outliers} outliers out of {n} samples); \
         the outlier level alpha must not be too low, try a larger alpha"
    )]
    SingleClass {
        n_outliers: usize,
        n: usize,
        alpha: Option<f64>,
    },

    #[error("{path}: row {row}, column {column}: {message}")]
    Parse {
        path: PathBuf,
        row: usize,
        column: String,
        message: String,
    },

    #[error("unsupported model file version {found} (this build reads version {supported})")]
    ModelVersion { found: u32, supported: u32 },

    #[error("corrupt model file: {0}")]
    CorruptModel(String),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn shape(context: &'static str, expected: impl ToString, actual: impl ToString) -> Self {
        Error::Shape {
            context,
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures of the numerical procedures themselves, as opposed to
    /// bad input or I/O.
    pub fn is_numerical(&self) -> bool {
        matches!(self, Error::Numerical(_) | Error::SingleClass { .. })
    }
}
