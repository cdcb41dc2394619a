//! Dense tensors and a fixed-vocabulary layer graph with hand-written
//! reverse-mode gradients.
//!
//! The vocabulary is deliberately closed (convolution, bias, ReLU, max-pool,
//! flatten, fully-connected, L2-normalize); every backward rule is checked
//! against central finite differences by [`grad_check`].

mod graph;
mod serial;
mod tensor;

use thiserror::Error;

pub use graph::{
    backward, backward_with, forward, grad_check, ActivationTrace, ComputationGraph, GradRequest,
    Gradients, Layer, NORM_EPSILON,
};
pub use serial::{read_weights, weights_from_bytes, weights_to_bytes, write_weights, WEIGHTS_VERSION};
pub use tensor::Tensor;

#[derive(Debug, Error)]
pub enum AutodiffError {
    #[error("shape {shape:?} does not match data length {len}")]
    ShapeData { shape: Vec<usize>, len: usize },
    #[error("non-finite value at index {index}")]
    NonFinite { index: usize },
    #[error("weight `{name}` contains non-finite values")]
    NonFiniteWeight { name: String },
    #[error("layer {layer} produced non-finite activations")]
    NonFiniteActivation { layer: usize },
    #[error("layer {layer}: {reason}")]
    LayerShape { layer: usize, reason: String },
    #[error("layer {layer}: expected input shape {expected:?}, got {actual:?}")]
    InputShape {
        layer: usize,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },
    #[error("unknown weight `{0}`")]
    UnknownWeight(String),
    #[error("weight `{name}` has shape {expected:?}, got {actual:?}")]
    WeightShape {
        name: String,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },
    #[error("output gradient shape {actual:?} does not match graph output {expected:?}")]
    OutputGradShape {
        expected: Vec<usize>,
        actual: Vec<usize>,
    },
    #[error("activation trace does not belong to this graph (stale or foreign)")]
    StaleTrace,
    #[error("weights file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
