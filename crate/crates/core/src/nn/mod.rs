//! Minimal differentiable-computation layer: tensors, a reverse-mode tape,
//! transformer building blocks, AdamW, checkpoints, and gradient checking.

pub mod checkpoint;
pub mod gradcheck;
pub mod graph;
pub mod layers;
pub mod optim;
pub mod tensor;

pub use graph::{Graph, NodeId};
pub use layers::{attention, LayerNorm, Linear, Mlp, MultiHeadAttention, Transformer, TransformerBlock, TransformerConfig};
pub use optim::{adamw_step, AdamWConfig, ParamId, ParamStore};
pub use tensor::Tensor;
