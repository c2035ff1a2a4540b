use thiserror::Error;

/// Errors raised by the simulation and analysis layers.
#[derive(Debug, Error)]
pub enum Error {
    /// An argument lies outside the domain of the operation.
    #[error("domain error: {0}")]
    Domain(String),

    /// A configuration value is invalid or inconsistent.
    #[error("configuration error: {0}")]
    Config(String),

    /// A coefficient or state became non-finite.
    #[error("numerical error at copy {copy}, location {location}: {message}")]
    NonFinite {
        copy: usize,
        location: usize,
        message: String,
    },

    /// The state exceeded the blow-up cap.
    #[error("blow-up: |u| = {value:e} exceeds cap {cap:e} at step {step}")]
    BlowUp { value: f64, cap: f64, step: usize },

    /// Linear algebra or other numerical failure.
    #[error("numerical failure: {0}")]
    Numerical(String),

    /// Required data was not recorded.
    #[error("missing data: {0}")]
    Missing(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn numerical(msg: impl Into<String>) -> Self {
        Error::Numerical(msg.into())
    }
}
