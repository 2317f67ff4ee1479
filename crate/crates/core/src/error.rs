use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("conditioning failed: state-action covariance is singular (condition number {condition_number:.3e})")]
    Conditioning { condition_number: f64 },
    #[error("backward pass failed at step {step}: Q_uu not positive definite")]
    BackwardPass { step: usize },
    #[error("cost expansion produced a non-finite derivative at step {step}")]
    Expansion { step: usize },
    #[error("evaluation error: {0}")]
    Evaluation(String),
    #[error("fit error: {0}")]
    Fit(String),
    #[error("training diverged: {0}")]
    Divergence(String),
    #[error("missing files: {}", .0.join(", "))]
    MissingFiles(Vec<String>),
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
