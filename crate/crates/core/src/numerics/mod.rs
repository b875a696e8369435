//! Tensors, the differentiation tape, transformer blocks, the optimizer and
//! the learning-rate schedule.

mod gradcheck;
mod graph;
mod layers;
mod optim;
mod tensor;

pub use gradcheck::{grad_check, GradCheckConfig, GradCheckReport};
pub use graph::{BatchStats, Gradients, Graph, Var, NORM_EPS};
pub use layers::{
    feed_forward, layer_norm_residual, multi_head_attention, AttentionWeights,
    FeedForwardWeights, NormWeights,
};
pub use optim::{clip_global_norm, AdamW, AdamWConfig, Moments, Schedule};
pub use tensor::{numel, DType, Real, Tensor};

/// Scalar exact GELU.
pub fn gelu<T: Real>(x: T) -> T {
    graph::gelu_scalar(x)
}
