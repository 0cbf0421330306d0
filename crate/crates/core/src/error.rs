use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),
    #[error("unsupported kernel: {0}")]
    UnsupportedKernel(String),
    #[error("unknown bound id `{0}`")]
    UnknownBound(String),
    #[error("grid mismatch: {0}")]
    GridMismatch(String),
    #[error("path {path} diverged at step {step}")]
    Diverged { path: u64, step: usize },
    #[error("initial condition violates its Hölder certificate at y = {y}")]
    InvalidInitialCondition { y: f64 },
    #[error("invalid model: {0}")]
    InvalidModel(String),
    #[error("fingerprint mismatch: {0}")]
    FingerprintMismatch(String),
    #[error("unreliable finite-difference oracle: {0}")]
    UnreliableOracle(String),
    #[error("undefined exponent: {0}")]
    UndefinedExponent(String),
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("io error: {0}")]
    Io(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub(crate) fn domain<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Domain(msg.into()))
}
