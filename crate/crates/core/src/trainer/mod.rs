//! Supervised CTC fine-tuning with failure-mode instrumentation: loss
//! watchdog, non-finite detection, gradient clipping, checkpointing.

mod adam;
mod fit;

pub use adam::Adam;
pub use fit::{fit, prepare_targets, EpochEval, FitReport, RunStatus, TokenizationSpec};

use serde::{Deserialize, Serialize};

use crate::ctc::{ctc_loss, validate_lattice};
use crate::encoders::{forward, EncoderConfig, ForwardOpts};
use crate::numerics::{kernels, ParamSet, Tensor};
use crate::signals::RawRecording;
use crate::tokenizers::TokenSequence;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global-norm clip; `None` disables clipping entirely.
    pub clip_norm: Option<f64>,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub watchdog_soft_threshold: f64,
    pub watchdog_hard_threshold: f64,
    /// Fraction of total steps spent in linear warmup.
    pub warmup_frac: f64,
    pub zscore: bool,
    pub dropout: bool,
    /// Abort the run when the watchdog raises a hard flag.
    pub fail_on_hard: bool,
    /// Abort after this many skipped (non-finite) steps.
    pub max_skipped_steps: usize,
    /// Moving-average window for the watchdog.
    pub watchdog_window: usize,
    /// Deliberate corruption for diagnostics testing.
    pub fault: Option<FaultInjection>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 3e-4,
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
            clip_norm: Some(1.0),
            batch_size: 8,
            epochs: 5,
            seed: 0,
            watchdog_soft_threshold: 2.0,
            watchdog_hard_threshold: 30.0,
            warmup_frac: 0.1,
            zscore: true,
            dropout: true,
            fail_on_hard: true,
            max_skipped_steps: 20,
            watchdog_window: 10,
            fault: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return Err(Error::Config(format!("clip_norm {c} must be positive")));
            }
        }
        if self.watchdog_soft_threshold > self.watchdog_hard_threshold {
            return Err(Error::Config(
                "watchdog soft threshold above hard threshold".into(),
            ));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config("batch_size and epochs must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.warmup_frac) {
            return Err(Error::Config("warmup_frac outside [0, 1]".into()));
        }
        Ok(())
    }
}

/// Deliberate fault for reproducing documented failure modes.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FaultInjection {
    /// Add a constant to every lattice entry before validation; positive
    /// values reproduce the invalid log-probability pathology.
    LatticeAdd(f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum FlagKind {
    LossHighSoft,
    LossHighHard,
    NonFiniteLoss,
    NonFiniteGrad,
    NegativeCtcInput,
}

impl std::fmt::Display for FlagKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            FlagKind::LossHighSoft => "LossHighSoft",
            FlagKind::LossHighHard => "LossHighHard",
            FlagKind::NonFiniteLoss => "NonFiniteLoss",
            FlagKind::NonFiniteGrad => "NonFiniteGrad",
            FlagKind::NegativeCtcInput => "NegativeCtcInput",
        };
        write!(f, "{s}")
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DiagnosticFlag {
    pub kind: FlagKind,
    pub step: usize,
    pub payload: String,
}

/// Outcome of clipping: the pre-clip global L2 norm and what happened.
#[derive(Clone, Copy, Debug)]
pub struct ClipOutcome {
    pub norm: f64,
    pub finite: bool,
    pub clipped: bool,
}

/// Scale all gradients by clip_norm / norm when the global L2 norm exceeds
/// clip_norm. A non-finite norm leaves gradients untouched and reports it.
pub fn clip_gradients(grads: &mut [(String, Tensor)], clip_norm: f64) -> ClipOutcome {
    let mut sq = 0.0f64;
    for (_, g) in grads.iter() {
        for &v in g.data() {
            sq += v * v;
        }
    }
    let norm = sq.sqrt();
    if !norm.is_finite() {
        return ClipOutcome {
            norm,
            finite: false,
            clipped: false,
        };
    }
    if norm > clip_norm {
        let scale = clip_norm / norm;
        for (_, g) in grads.iter_mut() {
            for v in g.data_mut() {
                *v *= scale;
            }
        }
        ClipOutcome {
            norm,
            finite: true,
            clipped: true,
        }
    } else {
        ClipOutcome {
            norm,
            finite: true,
            clipped: false,
        }
    }
}

/// Moving-average and non-finite checks over a loss window.
pub fn watchdog(window: &[f64], config: &TrainConfig) -> Vec<FlagKind> {
    let mut flags = Vec::new();
    if window.is_empty() {
        return flags;
    }
    if window.iter().any(|v| !v.is_finite()) {
        flags.push(FlagKind::NonFiniteLoss);
        return flags;
    }
    let mean = window.iter().sum::<f64>() / window.len() as f64;
    if mean > config.watchdog_hard_threshold {
        flags.push(FlagKind::LossHighHard);
    } else if mean > config.watchdog_soft_threshold {
        flags.push(FlagKind::LossHighSoft);
    }
    flags
}

/// What one optimizer step produced.
#[derive(Clone, Debug)]
pub struct StepOutcome {
    /// Batch mean of per-character CTC losses; None when the step was skipped.
    pub loss: Option<f64>,
    pub flags: Vec<DiagnosticFlag>,
    /// True when the parameter update was skipped or aborted.
    pub skipped: bool,
    /// True when the run should stop (unrecoverable condition).
    pub abort: bool,
}

/// One batch: forward, validate, CTC loss, backward, clip, Adam.
///
/// Watchdog evaluation happens in [`fit`], which owns the loss trace; this
/// level emits the per-step flags (NegativeCtcInput, NonFiniteLoss,
/// NonFiniteGrad).
#[allow(clippy::too_many_arguments)]
pub fn train_step(
    params: &mut ParamSet,
    optimizer: &mut Adam,
    encoder_config: &EncoderConfig,
    batch: &[(&RawRecording, &TokenSequence)],
    config: &TrainConfig,
    step: usize,
) -> Result<StepOutcome> {
    if batch.is_empty() {
        return Err(Error::InvalidInput("empty batch".into()));
    }
    struct TrialOut {
        loss: f64,
        grads: Vec<(String, Tensor)>,
    }
    let frozen = params.clone();
    let batch_len = batch.len();
    let results: Vec<Result<TrialOut>> = kernels::map_indexed(batch_len, |i| {
        let (recording, target) = batch[i];
        let fwd = forward(
            encoder_config,
            &frozen,
            recording,
            ForwardOpts {
                zscore: config.zscore,
                trainable: true,
                dropout: config.dropout && encoder_config.dropout > 0.0,
                dropout_seed: config
                    .seed
                    .wrapping_mul(0x9E37_79B9_7F4A_7C15)
                    .wrapping_add((step * batch_len + i) as u64),
                mask: None,
            },
        )?;
        let mut lattice = fwd.lattice()?;
        if let Some(FaultInjection::LatticeAdd(delta)) = config.fault {
            let t = lattice.timesteps();
            let v = lattice.vocab_size();
            let values: Vec<f64> = lattice.values().iter().map(|x| x + delta).collect();
            lattice = crate::ctc::LogProbLattice::new(t, v, values)?;
        }
        validate_lattice(&lattice).into_result()?;
        let ctc = ctc_loss(&lattice, target)?;
        let per_char = ctc.loss / target.len().max(1) as f64;
        // d(batch mean per-char loss)/d lattice
        let scale = 1.0 / (target.len().max(1) * batch_len) as f64;
        let shape = vec![lattice.timesteps(), lattice.vocab_size()];
        let seed_data: Vec<f64> = ctc.grad.iter().map(|g| g * scale).collect();
        let seed = Tensor::new(shape, seed_data)?;
        let mut grads = fwd.graph.backward_seeded(fwd.lattice_node, seed)?;
        Ok(TrialOut {
            loss: per_char,
            grads: fwd.collect_grads(&mut grads),
        })
    });

    let mut flags = Vec::new();
    let mut batch_loss = 0.0f64;
    let mut merged: std::collections::BTreeMap<String, Tensor> = std::collections::BTreeMap::new();
    for result in results {
        match result {
            Ok(out) => {
                batch_loss += out.loss / batch_len as f64;
                for (name, grad) in out.grads {
                    match merged.get_mut(&name) {
                        Some(acc) => {
                            for (a, &b) in acc.data_mut().iter_mut().zip(grad.data()) {
                                *a += b;
                            }
                        }
                        None => {
                            merged.insert(name, grad);
                        }
                    }
                }
            }
            Err(Error::InvalidLogProb {
                max_entry,
                max_row_residual,
            }) => {
                // invalid log-probabilities would read as a negative CTC loss;
                // surface them as a diagnostic and abort instead
                flags.push(DiagnosticFlag {
                    kind: FlagKind::NegativeCtcInput,
                    step,
                    payload: format!(
                        "max entry {max_entry:.3e}, row residual {max_row_residual:.3e}"
                    ),
                });
                return Ok(StepOutcome {
                    loss: None,
                    flags,
                    skipped: true,
                    abort: true,
                });
            }
            Err(Error::InvalidInput(msg)) | Err(Error::Data(msg)) => {
                // non-finite activations or underflowed path probabilities
                flags.push(DiagnosticFlag {
                    kind: FlagKind::NonFiniteLoss,
                    step,
                    payload: msg,
                });
                return Ok(StepOutcome {
                    loss: None,
                    flags,
                    skipped: true,
                    abort: false,
                });
            }
            Err(e) => return Err(e),
        }
    }

    if !batch_loss.is_finite() {
        flags.push(DiagnosticFlag {
            kind: FlagKind::NonFiniteLoss,
            step,
            payload: format!("batch loss {batch_loss}"),
        });
        return Ok(StepOutcome {
            loss: Some(batch_loss),
            flags,
            skipped: true,
            abort: false,
        });
    }

    let mut grads: Vec<(String, Tensor)> = merged.into_iter().collect();
    if let Some(clip) = config.clip_norm {
        let outcome = clip_gradients(&mut grads, clip);
        if !outcome.finite {
            flags.push(DiagnosticFlag {
                kind: FlagKind::NonFiniteGrad,
                step,
                payload: format!("global norm {}", outcome.norm),
            });
            return Ok(StepOutcome {
                loss: Some(batch_loss),
                flags,
                skipped: true,
                abort: false,
            });
        }
    } else if grads
        .iter()
        .any(|(_, g)| g.data().iter().any(|v| !v.is_finite()))
    {
        flags.push(DiagnosticFlag {
            kind: FlagKind::NonFiniteGrad,
            step,
            payload: "non-finite gradient with clipping disabled".into(),
        });
        return Ok(StepOutcome {
            loss: Some(batch_loss),
            flags,
            skipped: true,
            abort: false,
        });
    }

    optimizer.update(params, &grads)?;
    Ok(StepOutcome {
        loss: Some(batch_loss),
        flags,
        skipped: false,
        abort: false,
    })
}
