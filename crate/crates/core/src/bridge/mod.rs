//! Unsupervised acoustic-to-phoneme bridge trained adversarially against
//! unpaired text.

pub mod lattice;
pub mod losses;
pub mod model;
pub mod select;
pub mod train;

pub use lattice::{frame_error_rate, stride_map, PhonemeLattice};

#[derive(Debug, thiserror::Error)]
pub enum BridgeError {
    #[error("shape: {0}")]
    Shape(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("input of {frames} frames is shorter than the receptive field {required}")]
    TooShort { frames: usize, required: usize },
    #[error("empty batch")]
    EmptyBatch,
    #[error("discriminator output {0} outside [0, 1]")]
    InvalidProbability(f64),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("training diverged: {0}")]
    Diverged(String),
    #[error(transparent)]
    Numerics(#[from] crate::numerics::NumericsError),
}
