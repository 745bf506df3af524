use thiserror::Error;

/// Errors raised by tensor operations, layers, and model assembly.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: axis {axis} out of range for rank {rank}")]
    Axis { op: &'static str, axis: usize, rank: usize },
    #[error("{op}: input outside the domain ({detail})")]
    Domain { op: &'static str, detail: String },
    #[error("contract violated: {0}")]
    Contract(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("invalid stem spec {spec:?}: {reason}")]
    StemSpec { spec: String, reason: String },
    #[error("data error: {0}")]
    Data(String),
    /// Raised by optimizers on non-finite gradients; the training loop turns
    /// it into a diverged run rather than a failure.
    #[error("diverged: {0}")]
    Diverged(String),
    #[error("io error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Data(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
