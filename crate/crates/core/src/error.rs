use semlink_tensor::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    Dimension {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("no frame found (peak metric {peak:.3} below threshold {threshold:.3})")]
    NoFrame { peak: f64, threshold: f64 },

    #[error("zero energy in {0}")]
    ZeroEnergy(&'static str),

    #[error("I/Q correction is singular: 1 - k_i*k_q = {0:e}")]
    Singular(f64),

    #[error("{0}")]
    Analysis(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
