use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid diffusion spec: {0}")]
    InvalidSpec(String),

    #[error("diffusion is not transient: both s(l+) and s(r-) are infinite")]
    NotTransient,

    #[error("point {x} is outside the open state interval ({left}, {right})")]
    Domain { x: f64, left: f64, right: f64 },

    #[error("numeric failure at t={t}, x={x}: {what}")]
    Numeric { t: f64, x: f64, what: String },

    #[error("boundary classification indeterminate: {0}")]
    IndeterminateBoundary(String),

    #[error("scale inversion failed for target {target} (bracket [{lo}, {hi}])")]
    Inversion { target: f64, lo: f64, hi: f64 },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("bridge incomplete: local time {reached:.4} < target {target:.4} at phase-1 horizon {horizon}")]
    IncompleteBridge {
        reached: f64,
        target: f64,
        horizon: f64,
    },

    #[error("degenerate sample: {0}")]
    Degenerate(String),

    #[error("i/o error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Config(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
