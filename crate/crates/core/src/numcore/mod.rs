//! Tensors, reverse-mode differentiation, parameters and the outer optimizer.

pub mod checkpoint;
pub mod gradcheck;
mod graph;
pub mod linalg;
mod optim;
mod params;
mod tensor;

pub use graph::{Adjoints, ConvGeom, CustomOp, Graph, NodeId, ParamId, Precision};
pub use optim::{sgd_nesterov_step, OptimizerState, DEFAULT_MOMENTUM, DEFAULT_WEIGHT_DECAY};
pub use params::ParamSet;
pub use tensor::Tensor;

pub(crate) use graph::softplus;

#[derive(Debug, thiserror::Error)]
pub enum NumError {
    #[error("{op}: shape mismatch (expected {expected:?}, got {got:?})")]
    ShapeMismatch {
        op: &'static str,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("invalid shape {0:?}: dimensions must be positive")]
    InvalidShape(Vec<usize>),
    #[error("expected a single-element tensor, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("non-finite value produced by {op} at node {node}")]
    NonFinite { node: usize, op: &'static str },
    #[error("non-finite gradient in backward of {op} at node {node}")]
    NonFiniteGrad { node: usize, op: &'static str },
    #[error("near-singular system in {block}")]
    Singular { block: String },
    #[error("function is not deterministic: {first} vs {second}")]
    NonDeterministic { first: f64, second: f64 },
    #[error("{0}")]
    InvalidArgument(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
