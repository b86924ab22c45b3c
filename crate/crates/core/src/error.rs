use thiserror::Error;

/// Errors raised by the numerical core.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("shape mismatch in {context}: expected {expected}, got {actual}")]
    Shape {
        context: &'static str,
        expected: usize,
        actual: usize,
    },
    #[error("non-finite value: {0}")]
    Numeric(String),
    #[error("value out of range: {0}")]
    Range(String),
    #[error("contract violated: {0}")]
    Contract(String),
    #[error("replay buffer not ready: {0}")]
    NotReady(String),
    #[error("capability not supported: {0}")]
    Capability(String),
    #[error("did not converge after {iterations} iterations (last delta {last_delta:e})")]
    NoConvergence { iterations: usize, last_delta: f64 },
    #[error("environment fault at step {step}: {message}")]
    EnvFault { step: u64, message: String },
    #[error("parse error: {0}")]
    Parse(String),
    #[error("i/o error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(err: std::io::Error) -> Self {
        Error::Io(err.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn check_len(context: &'static str, expected: usize, actual: usize) -> Result<()> {
    if expected == actual {
        Ok(())
    } else {
        Err(Error::Shape {
            context,
            expected,
            actual,
        })
    }
}
