use thiserror::Error;

/// Crate-wide error type.
///
/// The CLI maps these onto exit codes: config/usage problems -> 1,
/// data problems -> 2, numeric failures (NaN/Inf) -> 3.
#[derive(Debug, Error)]
pub enum Error {
    /// Dimension or shape contract violated.
    #[error("shape: {0}")]
    Shape(String),

    /// NaN/Inf reached a place that requires finite values.
    #[error("numeric: {0}")]
    Numeric(String),

    /// Malformed or inconsistent input data.
    #[error("data: {0}")]
    Data(String),

    /// Invalid configuration or argument.
    #[error("config: {0}")]
    Config(String),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }

    pub fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}
