use thiserror::Error;

/// Errors raised anywhere in the laboratory.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    /// Argument outside the mathematical domain of a function.
    #[error("domain error: {0}")]
    Domain(String),
    /// Parameters fall in a regime the requested computation does not cover.
    #[error("regime error: {0}")]
    Regime(String),
    /// A documented precondition of an operation was violated.
    #[error("precondition violated: {0}")]
    Precondition(String),
    /// An iterative method failed; carries the last residual it saw.
    #[error("numerical failure: {message} (last residual {residual:e})")]
    Numerical { message: String, residual: f64 },
    /// A profile relaxation or Newton solve did not converge.
    #[error("no convergence: {message} (last residual {residual:e})")]
    Convergence { message: String, residual: f64 },
    /// An evolution left its admissible envelope.
    #[error("stability error: {0}")]
    Stability(String),
    /// A decay fit could not be computed.
    #[error("fit error: {0}")]
    Fit(String),
    /// Invalid configuration; `line` is 0 when not tied to a file line.
    #[error("config error (line {line}, key `{key}`): {message}")]
    Config { line: usize, key: String, message: String },
    #[error("io error: {0}")]
    Io(String),
}

impl Error {
    pub(crate) fn numerical(message: impl Into<String>, residual: f64) -> Self {
        Error::Numerical { message: message.into(), residual }
    }

    pub(crate) fn config(key: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config { line: 0, key: key.into(), message: message.into() }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
