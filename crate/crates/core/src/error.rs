use thiserror::Error;

/// Errors produced across the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("unsupported size {0}: FFT dimensions must be powers of two")]
    UnsupportedSize(usize),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite value produced by op `{op}`")]
    Poisoned { op: &'static str },
    #[error("invalid parameter: {0}")]
    InvalidParam(String),
    #[error("infeasible sampling mask: {0}")]
    InfeasibleMask(String),
    #[error("measurement is not in the range of the forward operator (max deviation {0:e})")]
    InconsistentMeasurement(f64),
    #[error("empty input: {0}")]
    Empty(String),
    #[error("singular covariance: {0}")]
    SingularCovariance(String),
    #[error("training diverged at epoch {epoch}: {reason}")]
    Diverged { epoch: usize, reason: String },
    #[error("mismatch: {0}")]
    Mismatch(String),
    #[error("format error: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
