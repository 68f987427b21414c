//! Connectionist Temporal Classification: log-space forward-backward loss
//! with exact gradients, the collapse map, and greedy/prefix-beam decoding.

mod decode;
mod loss;

pub use decode::{beam_decode, collapse, greedy_decode, Hypothesis};
pub use loss::{ctc_loss, ctc_loss_unvalidated, CtcResult};

use crate::{Error, Result};

/// T x V matrix of per-timestep log-probabilities over the token vocabulary.
#[derive(Clone, Debug, PartialEq)]
pub struct LogProbLattice {
    t: usize,
    v: usize,
    values: Vec<f64>,
}

impl LogProbLattice {
    /// Wrap raw values; validity is checked separately by [`validate_lattice`].
    pub fn new(t: usize, v: usize, values: Vec<f64>) -> Result<Self> {
        if t == 0 || v < 2 {
            return Err(Error::Shape(format!(
                "lattice needs t >= 1 and v >= 2 (blank plus one symbol), got {t} x {v}"
            )));
        }
        if values.len() != t * v {
            return Err(Error::Shape(format!(
                "lattice {t} x {v} wants {} values, got {}",
                t * v,
                values.len()
            )));
        }
        Ok(LogProbLattice { t, v, values })
    }

    /// Apply a row-wise log softmax to raw logits.
    pub fn from_logits(t: usize, v: usize, logits: &[f64]) -> Result<Self> {
        if logits.len() != t * v {
            return Err(Error::Shape(format!(
                "logits {t} x {v} wants {} values, got {}",
                t * v,
                logits.len()
            )));
        }
        let mut values = Vec::with_capacity(t * v);
        for r in 0..t {
            values.extend(crate::numerics::log_softmax(&logits[r * v..(r + 1) * v])?);
        }
        LogProbLattice::new(t, v, values)
    }

    pub fn timesteps(&self) -> usize {
        self.t
    }

    pub fn vocab_size(&self) -> usize {
        self.v
    }

    pub fn row(&self, t: usize) -> &[f64] {
        &self.values[t * self.v..(t + 1) * self.v]
    }

    pub fn get(&self, t: usize, k: usize) -> f64 {
        self.values[t * self.v + k]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// T x V tensor view, e.g. for dumping into the checkpoint container
    /// while debugging.
    pub fn to_tensor(&self) -> crate::numerics::Tensor {
        crate::numerics::Tensor::new(vec![self.t, self.v], self.values.clone())
            .expect("lattice dims are consistent")
    }
}

/// Per-lattice health report; the observable form of the
/// positive-"log-probability" failure mode that reads as a negative CTC loss
/// downstream.
#[derive(Clone, Copy, Debug)]
pub struct LatticeDiagnostic {
    /// Largest entry anywhere; must stay <= 1e-9.
    pub max_entry: f64,
    /// Largest |logsumexp(row)| over rows; must stay <= 1e-6.
    pub max_row_residual: f64,
    pub finite: bool,
}

pub const MAX_ENTRY_SLACK: f64 = 1e-9;
pub const ROW_RESIDUAL_SLACK: f64 = 1e-6;

impl LatticeDiagnostic {
    pub fn is_ok(&self) -> bool {
        self.finite
            && self.max_entry <= MAX_ENTRY_SLACK
            && self.max_row_residual <= ROW_RESIDUAL_SLACK
    }

    pub fn into_result(self) -> Result<()> {
        if self.is_ok() {
            Ok(())
        } else {
            Err(Error::InvalidLogProb {
                max_entry: self.max_entry,
                max_row_residual: self.max_row_residual,
            })
        }
    }
}

/// Check every entry is a log-probability and every row normalizes.
pub fn validate_lattice(lattice: &LogProbLattice) -> LatticeDiagnostic {
    let mut max_entry = f64::NEG_INFINITY;
    let mut max_row_residual: f64 = 0.0;
    let mut finite = true;
    for t in 0..lattice.t {
        let row = lattice.row(t);
        for &v in row {
            if !v.is_finite() && v != f64::NEG_INFINITY {
                finite = false;
            }
            if v > max_entry {
                max_entry = v;
            }
        }
        let residual = crate::numerics::kernels::logsumexp(row);
        if !residual.is_finite() {
            finite = false;
        } else if residual.abs() > max_row_residual {
            max_row_residual = residual.abs();
        }
    }
    LatticeDiagnostic {
        max_entry,
        max_row_residual,
        finite,
    }
}
