//! A small differentiable core for the three-branch activity network.
//!
//! Phone and watch inertial windows each pass through a stack of
//! convolution + ReLU blocks separated by max pooling, a global max pool and
//! a dense layer. The multi-hot context vector goes through one dense layer.
//! The three feature vectors (and, for the symbolic-features strategy, the
//! consistency vector) are concatenated, passed through dropout, a hidden
//! dense layer and a softmax output layer.
//!
//! Gradients are exact reverse-mode derivatives; [`crate::gradcheck`]
//! verifies them against central finite differences.

mod adam;
pub mod layers;
mod network;
mod tensor;

pub use adam::{Adam, AdamConfig};
pub use network::{
    backward, backward_into, build_network, forward, BackwardOptions, BranchParams, BranchSpec, Conv, Dense, Gradients,
    InputGradients, Mode, NetworkInput, NetworkSpec, Parameters, Trace,
};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NetworkError {
    #[error("invalid network spec at {layer}: {message}")]
    InvalidSpec { layer: String, message: String },
    #[error("shape mismatch for {tensor}: expected {expected}, got {got}")]
    Shape {
        tensor: String,
        expected: String,
        got: String,
    },
    #[error("trace is stale: parameters changed since the forward pass")]
    StaleTrace,
    #[error("trace comes from an inference pass; backward needs a training-mode forward")]
    InferenceTrace,
    #[error("non-finite gradient in {0}")]
    NonFiniteGradient(String),
}
