use thiserror::Error;

/// Errors raised by the filtering library and the experiment harness.
#[derive(Debug, Error)]
pub enum Error {
    /// An argument lies outside the domain where an operation is defined.
    #[error("domain error: {0}")]
    Domain(String),

    /// A computation produced a non-finite value.
    #[error("numerical failure: {0}")]
    Numerical(String),

    /// Inconsistent vector or matrix sizes.
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// Invalid run configuration; `path` is the dotted key that failed.
    #[error("configuration error at `{path}`: {message}")]
    Config { path: String, message: String },

    /// Malformed input data (for example a CSV file).
    #[error("input error: {0}")]
    Input(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn config(path: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            path: path.into(),
            message: message.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
