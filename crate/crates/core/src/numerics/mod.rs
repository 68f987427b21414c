//! Minimal dense-tensor core with reverse-mode differentiation.
//!
//! Parameters and activations are f32; logsumexp, losses, and reductions
//! accumulate in f64. Kernels may run data-parallel (`parallel` feature) but
//! produce bit-identical results to the sequential path.

mod checkpoint;
mod compose;
mod gradcheck;
mod graph;
pub mod kernels;
mod params;
mod rng;
mod tensor;

pub use checkpoint::{
    inspect_checkpoint, load_checkpoint, save_checkpoint, CheckpointEntry, CHECKPOINT_MAGIC,
};
pub use compose::{cosine_rows, feed_forward, self_attention, AttentionWeights};
pub use gradcheck::{grad_check, registered_ops};
pub use graph::{Gradients, Graph, NodeId};
pub(crate) use graph::argmax as argmax_row;
pub use params::ParamSet;
pub use rng::Rng;
pub use tensor::Tensor;

use crate::{Error, Result};

/// Numerically stable log softmax of a logit vector.
///
/// Shift-invariant by construction; every output is <= 0 and the outputs
/// exp-sum to 1 to f64 accuracy even for |logits| up to 1e4.
pub fn log_softmax(logits: &[f64]) -> Result<Vec<f64>> {
    if logits.is_empty() {
        return Err(Error::InvalidInput("log_softmax of empty vector".into()));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput(
            "log_softmax received non-finite logits".into(),
        ));
    }
    let lse = kernels::logsumexp(logits);
    Ok(logits.iter().map(|&x| x - lse).collect())
}
