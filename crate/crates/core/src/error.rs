use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("singular matrix: {0}")]
    Singular(&'static str),

    #[error("invalid parameters: {0}")]
    InvalidParams(String),

    #[error("gaussian process factorization failed after jitter retry (n = {0})")]
    Factorization(usize),

    #[error("riccati iteration did not converge after {iterations} iterations (residual {residual:e})")]
    RiccatiDivergence { iterations: usize, residual: f64 },

    #[error("estimation window holds {have} samples, {need} required")]
    InsufficientSamples { have: usize, need: usize },

    #[error("invalid filter: {0}")]
    InvalidFilter(String),

    #[error("empty overlap between reference and executed trajectory")]
    EmptyOverlap,
}

pub type Result<T> = std::result::Result<T, Error>;

