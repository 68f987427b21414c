//! Self-supervised pretraining: masked contrastive learning over quantized
//! latents (wav2vec2 regime) and teacher-student masked regression (data2vec
//! regime).

mod objectives;
mod quantizer;
mod run;

pub use objectives::{
    contrastive_loss, contrastive_on_graph, data2vec_loss, data2vec_targets, sample_distractors,
};
pub use quantizer::{quantize, quantize_on_graph, Codebook};
pub use run::{pretrain_run, Objective, PretrainConfig, PretrainOutcome};

use crate::numerics::{ParamSet, Rng};
use crate::{Error, Result};

/// Masked latent frames: the union of sampled spans.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskPlan {
    /// Sorted, deduplicated frame indices.
    pub indices: Vec<usize>,
    pub span_length: usize,
    pub mask_prob: f64,
}

impl MaskPlan {
    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    /// Complement set, for masked-vs-unmasked comparisons.
    pub fn unmasked(&self, t_latent: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(t_latent - self.indices.len().min(t_latent));
        let mut iter = self.indices.iter().peekable();
        for t in 0..t_latent {
            if iter.peek() == Some(&&t) {
                iter.next();
            } else {
                out.push(t);
            }
        }
        out
    }
}

/// Each frame starts a span with probability `mask_prob`; spans are clipped
/// at the sequence end. Deterministic per seed.
pub fn plan_masks(
    t_latent: usize,
    mask_prob: f64,
    span_length: usize,
    seed: u64,
) -> Result<MaskPlan> {
    if span_length == 0 || t_latent < span_length {
        return Err(Error::InvalidInput(format!(
            "span {span_length} must satisfy 1 <= span <= t_latent {t_latent}"
        )));
    }
    if !(0.0..=1.0).contains(&mask_prob) {
        return Err(Error::InvalidInput(format!(
            "mask_prob {mask_prob} outside [0, 1]"
        )));
    }
    let mut rng = Rng::seed(seed);
    let mut masked = vec![false; t_latent];
    for start in 0..t_latent {
        if rng.bernoulli(mask_prob) {
            for slot in masked.iter_mut().skip(start).take(span_length) {
                *slot = true;
            }
        }
    }
    let indices = masked
        .iter()
        .enumerate()
        .filter_map(|(i, &m)| m.then_some(i))
        .collect();
    Ok(MaskPlan {
        indices,
        span_length,
        mask_prob,
    })
}

/// Shadow copy of the student updated by exponential moving average.
#[derive(Clone, Debug)]
pub struct TeacherState {
    pub shadow: ParamSet,
    pub ema_decay: f64,
    /// How many of the last trunk blocks feed the regression target.
    pub top_k: usize,
}

impl TeacherState {
    pub fn from_student(student: &ParamSet, ema_decay: f64, top_k: usize) -> Self {
        TeacherState {
            shadow: student.clone(),
            ema_decay,
            top_k,
        }
    }
}

/// shadow <- tau * shadow + (1 - tau) * student, elementwise.
pub fn ema_update(teacher: &mut TeacherState, student: &ParamSet, tau: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&tau) {
        return Err(Error::InvalidInput(format!("tau {tau} outside [0, 1]")));
    }
    for (name, shadow) in teacher.shadow.iter_mut() {
        let s = student.get(name)?;
        if s.shape() != shadow.shape() {
            return Err(Error::Shape(format!(
                "ema '{name}': shadow {:?} vs student {:?}",
                shadow.shape(),
                s.shape()
            )));
        }
        for (a, &b) in shadow.data_mut().iter_mut().zip(s.data()) {
            *a = tau * *a + (1.0 - tau) * b;
        }
    }
    Ok(())
}
