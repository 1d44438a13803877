//! Minimal differentiable computation substrate: dense tensors, a tape-style
//! graph with exact reverse-mode gradients, and a small pre-norm Transformer
//! built from those ops. Everything is f64 in memory; checkpoints store f32.

pub mod gradcheck;
pub mod graph;
pub mod tensor;
pub mod transformer;

pub use graph::{Grads, Graph, NodeId, ParamId, ParamSet};
pub use tensor::Tensor;
pub use transformer::{
    lm_log_probs, transformer_forward, transformer_hidden, TransformerConfig, TransformerParams,
};
