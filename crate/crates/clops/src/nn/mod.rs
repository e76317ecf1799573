//! Differentiable feedforward substrate: tensors, a reverse-mode tape,
//! dropout networks, and Adam.

pub mod adam;
pub mod graph;
pub mod network;
pub mod tensor;

pub use adam::{adam_step, AdamState, ScalarAdam};
pub use graph::{Graph, NodeId};
pub use network::{
    Activation, Checkpoint, DropoutMask, Gradients, Layer, Mode, Network, NetworkConfig,
    ParamNodes,
};
pub use tensor::{matmul, per_instance_ce, softmax_rows, Tensor};

#[derive(Debug, thiserror::Error)]
pub enum NnError {
    #[error("shape mismatch in {context}: expected {expected:?}, got {actual:?}")]
    ShapeMismatch {
        context: &'static str,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },
    #[error("non-finite value produced in {context}")]
    NonFinite { context: &'static str },
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("node does not belong to this graph")]
    DetachedNode,
    #[error("backward target must be scalar, got shape {shape:?}")]
    NotScalarLoss { shape: Vec<usize> },
    #[error("stochastic forward mode needs an rng stream")]
    MissingRng,
    #[error("invalid network config: {0}")]
    InvalidConfig(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
}
