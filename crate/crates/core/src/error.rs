use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("{what} = {value} is outside {domain}")]
    Domain {
        what: &'static str,
        value: f64,
        domain: String,
    },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error("covariance of component {index} is not symmetric positive-definite")]
    NotPositiveDefinite { index: usize },

    #[error("invalid target: {0}")]
    Target(String),

    #[error("invalid schedule: {0}")]
    Schedule(String),

    #[error("invalid time grid: {0}")]
    Grid(String),

    #[error("invalid adaptive config: {0}")]
    Adaptive(String),

    #[error("non-finite state at step {step} (t = {t}, |x| = {norm})")]
    NonFinite { step: usize, t: f64, norm: f64 },

    #[error("{0}")]
    Invalid(String),
}

impl Error {
    pub(crate) fn domain(what: &'static str, value: f64, domain: impl Into<String>) -> Self {
        Error::Domain {
            what,
            value,
            domain: domain.into(),
        }
    }
}
