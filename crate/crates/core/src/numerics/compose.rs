//! Building blocks composed from graph primitives.

use crate::Result;

use super::graph::{Graph, NodeId};
use super::tensor::Tensor;

/// Projection weights for one multi-head self-attention layer.
///
/// The key projection carries no bias: a per-query constant shift of the
/// scores cancels inside softmax, so a key bias is dead weight.
#[derive(Clone, Copy, Debug)]
pub struct AttentionWeights {
    pub wq: NodeId,
    pub bq: NodeId,
    pub wk: NodeId,
    pub wv: NodeId,
    pub bv: NodeId,
    pub wo: NodeId,
    pub bo: NodeId,
}

/// Scaled dot-product multi-head self-attention over x [T, D].
pub fn self_attention(
    g: &mut Graph,
    x: NodeId,
    heads: usize,
    w: &AttentionWeights,
) -> Result<NodeId> {
    let d = g.value(x).shape()[1];
    let dh = d / heads;
    let q0 = g.matmul(x, w.wq)?;
    let q = g.add_row(q0, w.bq)?;
    let k = g.matmul(x, w.wk)?;
    let v0 = g.matmul(x, w.wv)?;
    let v = g.add_row(v0, w.bv)?;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut head_outputs = Vec::with_capacity(heads);
    for h in 0..heads {
        let (from, to) = (h * dh, (h + 1) * dh);
        let qh = g.slice_cols(q, from, to)?;
        let kh = g.slice_cols(k, from, to)?;
        let vh = g.slice_cols(v, from, to)?;
        let kt = g.transpose(kh)?;
        let scores_raw = g.matmul(qh, kt)?;
        let scores = g.scale(scores_raw, scale)?;
        let attn = g.softmax(scores)?;
        head_outputs.push(g.matmul(attn, vh)?);
    }
    let merged = g.concat_cols(&head_outputs)?;
    let out0 = g.matmul(merged, w.wo)?;
    g.add_row(out0, w.bo)
}

/// Two-layer position-wise feed-forward with swish: W2(swish(W1 x + b1)) + b2.
pub fn feed_forward(
    g: &mut Graph,
    x: NodeId,
    w1: NodeId,
    b1: NodeId,
    w2: NodeId,
    b2: NodeId,
) -> Result<NodeId> {
    let h0 = g.matmul(x, w1)?;
    let h1 = g.add_row(h0, b1)?;
    let h2 = g.swish(h1)?;
    let o0 = g.matmul(h2, w2)?;
    g.add_row(o0, b2)
}

/// Row-wise cosine similarity between a [M, D] and b [M, D] -> [M].
///
/// Norms are floored by eps to keep the quotient differentiable at zero rows.
pub fn cosine_rows(g: &mut Graph, a: NodeId, b: NodeId, eps: f64) -> Result<NodeId> {
    let m = g.value(a).shape()[0];
    let aa = g.mul(a, a)?;
    let bb = g.mul(b, b)?;
    let ab = g.mul(a, b)?;
    let dot = g.row_sums(ab)?;
    let na2 = g.row_sums(aa)?;
    let nb2 = g.row_sums(bb)?;
    let na = g.sqrt(na2)?;
    let nb = g.sqrt(nb2)?;
    let denom0 = g.mul(na, nb)?;
    let eps_leaf = g.constant(Tensor::full(vec![m], eps));
    let denom = g.add(denom0, eps_leaf)?;
    g.div(dot, denom)
}
