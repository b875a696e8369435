//! Composite transformer building blocks expressed over tape ops.

use crate::error::Result;

use super::graph::{Graph, Var};
use super::tensor::Real;

/// Per-head projection matrices stored as `[D, D]` blocks (head `h` owns
/// columns `h * D/heads .. (h + 1) * D/heads`) plus the output projection.
#[derive(Debug, Clone, Copy)]
pub struct AttentionWeights {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct FeedForwardWeights {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct NormWeights {
    pub gamma: Var,
    pub beta: Var,
}

/// `Concat(head_1..head_h) W^O` with `head_i = Attention(Q W_i^Q, K W_i^K, V W_i^V)`.
/// Inputs are `[B, L, D]`.
pub fn multi_head_attention<T: Real>(
    g: &mut Graph<T>,
    q: Var,
    k: Var,
    v: Var,
    w: &AttentionWeights,
    heads: usize,
) -> Result<Var> {
    let qp = g.linear(q, w.wq, None)?;
    let kp = g.linear(k, w.wk, None)?;
    let vp = g.linear(v, w.wv, None)?;
    let ctx = g.attention(qp, kp, vp, heads)?;
    g.linear(ctx, w.wo, None)
}

/// Position-wise `W_2 GELU(W_1 x + b_1) + b_2`.
pub fn feed_forward<T: Real>(g: &mut Graph<T>, x: Var, w: &FeedForwardWeights) -> Result<Var> {
    let h = g.linear(x, w.w1, Some(w.b1))?;
    let h = g.gelu(h)?;
    g.linear(h, w.w2, Some(w.b2))
}

/// `LN(x + sub_output)` over the feature axis.
pub fn layer_norm_residual<T: Real>(
    g: &mut Graph<T>,
    x: Var,
    sub_output: Var,
    norm: &NormWeights,
) -> Result<Var> {
    let s = g.add(x, sub_output)?;
    g.layer_norm(s, norm.gamma, norm.beta)
}
