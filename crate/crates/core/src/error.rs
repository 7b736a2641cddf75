use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid dimension: {0}")]
    InvalidDimension(String),

    #[error("dimension mismatch in {context}: expected {expected}, found {found}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid measure: {0}")]
    InvalidMeasure(String),

    #[error("invalid network specification: {0}")]
    InvalidNetwork(String),

    #[error("non-finite iterate at step {step}; the step size is likely too large")]
    NonFinite { step: usize },

    #[error("time {s} outside path domain [0, {horizon}]")]
    OutOfRange { s: f64, horizon: f64 },

    #[error("point of norm {norm} lies outside the ball of radius {radius}")]
    OutOfBall { norm: f64, radius: f64 },

    #[error("refusing brute-force enumeration for n = {n} (limit {limit})")]
    TooLarge { n: usize, limit: usize },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
}

impl Error {
    pub(crate) fn mismatch(context: &'static str, expected: usize, found: usize) -> Self {
        Error::DimensionMismatch {
            context,
            expected,
            found,
        }
    }
}
