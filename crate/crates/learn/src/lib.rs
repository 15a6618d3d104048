//! Local training with fractal entanglement, and the gradient-inversion
//! attacks it is meant to blunt.

pub mod data;
pub mod fractal;
pub mod leakage;
pub mod mlp;
pub mod snnl;
pub mod train;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum LearnError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("no same-label pairs")]
    NoSameLabelPairs,
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("malformed file: {0}")]
    Format(String),
    #[error("training diverged at step {step} with loss {loss}")]
    Diverged { step: usize, loss: f64 },
    #[error("reconstruction loss stayed non-finite after {restarts} restarts")]
    ReconstructionFailed { restarts: usize },
    #[error("aggregation service: {0}")]
    Service(String),
}
