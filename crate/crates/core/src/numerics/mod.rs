//! Tensors, reverse-mode differentiation, and the neural building blocks the
//! rest of the crate composes.

pub mod ctc;
pub mod gradcheck;
pub mod graph;
pub mod kmeans;
pub mod nn;
pub mod optim;
pub mod params;
pub mod tensor;

pub use graph::{ConvGeom, Gradients, Graph, Var};
pub use params::{Param, ParamStore};
pub use tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum NumericsError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("non-finite value produced at {0}")]
    NonFinite(String),
    #[error("gradient requested for non-scalar output of shape {0:?}")]
    NonScalarOutput(Vec<usize>),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
