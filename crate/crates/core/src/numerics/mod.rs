//! Dense tensors, affine networks, reverse-mode gradients and AdamW.

pub mod checkpoint;
pub mod graph;
pub mod mlp;
pub mod optim;
pub mod tensor;

pub use graph::{Gradients, Graph, Unary, Var};
pub use mlp::{Layer, LayerSpec, MlpParams, NormMode, Parameters, LEAKY_SLOPE, NORM_EPS};
pub use optim::{adamw_step, gradient, named_gradients, AdamWConfig, OptState};
pub use tensor::Tensor;
