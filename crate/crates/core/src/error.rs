use thiserror::Error;

/// Crate-wide error type. Shape errors in graph construction panic instead
/// (they are programmer errors); everything data-dependent lands here.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("backward requires a scalar root, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),
    #[error("domain: {0}")]
    Domain(String),
    #[error("singularity: {0}")]
    Singularity(String),
    #[error("linear algebra: {0}")]
    LinearAlgebra(String),
    #[error("divergence at step {step}: {what}")]
    Divergence { step: usize, what: String },
    #[error("training diverged at step {step}")]
    TrainingDiverged { step: usize },
    #[error("calibration: {0}")]
    Calibration(String),
    #[error("config: {0}")]
    Config(String),
    #[error("oracle: {0}")]
    Oracle(String),
    #[error("non-finite evaluation: {0}")]
    NonFinite(String),
    #[error("parse: {0}")]
    Parse(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
