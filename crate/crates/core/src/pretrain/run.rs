//! The pretraining loop for both objectives.

use serde::{Deserialize, Serialize};

use crate::encoders::{forward, init_params, EncoderConfig, EncoderParams, ForwardOpts, MaskSpec};
use crate::numerics::{kernels, ParamSet, Rng, Tensor};
use crate::signals::Dataset;
use crate::trainer::{Adam, TrainConfig};
use crate::{Error, Result};

use super::objectives::{contrastive_on_graph, data2vec_targets, sample_distractors};
use super::quantizer::quantize_on_graph;
use super::{ema_update, plan_masks, TeacherState};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Objective {
    #[serde(rename = "wav2vec2")]
    Wav2Vec2,
    #[serde(rename = "data2vec")]
    Data2Vec,
}

impl std::fmt::Display for Objective {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Objective::Wav2Vec2 => write!(f, "wav2vec2"),
            Objective::Data2Vec => write!(f, "data2vec"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub mask_prob: f64,
    pub span_length: usize,
    /// Negatives per masked frame.
    pub distractors: usize,
    /// Contrastive temperature.
    pub kappa: f64,
    /// Weight of the codebook diversity term.
    pub diversity_weight: f64,
    pub groups: usize,
    pub entries: usize,
    pub gumbel_temperature: f64,
    /// EMA decay ramp endpoints over the run.
    pub tau_start: f64,
    pub tau_end: f64,
    /// Teacher blocks averaged into the regression target.
    pub top_k: usize,
    /// Smooth-L1 threshold.
    pub beta: f64,
    pub zscore: bool,
    /// Keep per-step teacher/student snapshots for offline EMA verification.
    pub record_trajectory: bool,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            steps: 200,
            batch_size: 4,
            learning_rate: 1e-3,
            mask_prob: 0.065,
            span_length: 10,
            distractors: 10,
            kappa: 0.1,
            diversity_weight: 0.1,
            groups: 2,
            entries: 64,
            gumbel_temperature: 2.0,
            tau_start: 0.999,
            tau_end: 0.9999,
            top_k: 4,
            beta: 1.0,
            zscore: true,
            record_trajectory: false,
        }
    }
}

impl PretrainConfig {
    fn validate(&self, model_dim: usize) -> Result<()> {
        if self.steps == 0 || self.batch_size == 0 {
            return Err(Error::Config("steps and batch_size must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.mask_prob) {
            return Err(Error::Config("mask_prob outside [0, 1]".into()));
        }
        if self.span_length == 0 {
            return Err(Error::Config("span_length must be >= 1".into()));
        }
        if self.distractors == 0 {
            return Err(Error::Config("distractors must be >= 1".into()));
        }
        if !(self.kappa > 0.0) || !(self.gumbel_temperature > 0.0) {
            return Err(Error::Config("temperatures must be positive".into()));
        }
        if self.groups == 0 || self.entries == 0 || self.groups * self.entries < 2 {
            return Err(Error::Config("codebook needs groups * entries >= 2".into()));
        }
        if model_dim % self.groups != 0 {
            return Err(Error::Config(format!(
                "model_dim {model_dim} not divisible into {} groups",
                self.groups
            )));
        }
        for tau in [self.tau_start, self.tau_end] {
            if !(0.0..=1.0).contains(&tau) {
                return Err(Error::Config("tau outside [0, 1]".into()));
            }
        }
        if self.top_k == 0 {
            return Err(Error::Config("top_k must be >= 1".into()));
        }
        if !(self.beta > 0.0) {
            return Err(Error::Config("beta must be positive".into()));
        }
        Ok(())
    }

    fn tau_at(&self, step: usize) -> f64 {
        if self.steps <= 1 {
            return self.tau_end;
        }
        let frac = step as f64 / (self.steps - 1) as f64;
        self.tau_start + (self.tau_end - self.tau_start) * frac
    }
}

pub struct PretrainOutcome {
    pub params: EncoderParams,
    /// Per-step batch mean objective value.
    pub loss_trace: Vec<f64>,
    /// (student snapshot, teacher snapshot) after every step, when recorded.
    pub trajectory: Vec<(ParamSet, ParamSet)>,
}

/// Self-supervised pretraining over an unlabeled dataset (targets ignored).
/// Deterministic per seed; the returned parameters keep the auxiliary
/// `pretrain.*` entries so runs can be inspected or resumed.
pub fn pretrain_run(
    dataset: &Dataset,
    encoder_config: &EncoderConfig,
    objective: Objective,
    config: &PretrainConfig,
    seed: u64,
) -> Result<PretrainOutcome> {
    encoder_config.validate()?;
    config.validate(encoder_config.model_dim)?;
    if dataset.is_empty() {
        return Err(Error::InvalidInput("empty dataset".into()));
    }
    if config.mask_prob == 0.0 {
        return Err(Error::NoMaskedFrames);
    }
    let d = encoder_config.model_dim;

    let mut params = init_params(encoder_config, seed)?;
    let mut aux_rng = Rng::seed(seed ^ 0x00C0_FFEE);
    params.values.insert(
        "pretrain.mask_emb",
        Tensor::fan_in_uniform(vec![d], d, &mut aux_rng),
    );
    match objective {
        Objective::Wav2Vec2 => {
            let dg = d / config.groups;
            params.values.insert(
                "pretrain.codebook",
                Tensor::fan_in_uniform(vec![config.groups * config.entries, dg], dg, &mut aux_rng),
            );
            for side in ["proj_c", "proj_q"] {
                params.values.insert(
                    format!("pretrain.{side}.w"),
                    Tensor::fan_in_uniform(vec![d, d], d, &mut aux_rng),
                );
                params
                    .values
                    .insert(format!("pretrain.{side}.b"), Tensor::zeros(vec![d]));
            }
        }
        Objective::Data2Vec => {
            params.values.insert(
                "pretrain.reg.w",
                Tensor::fan_in_uniform(vec![d, d], d, &mut aux_rng),
            );
            params.values.insert("pretrain.reg.b", Tensor::zeros(vec![d]));
        }
    }

    let mut teacher = TeacherState::from_student(&params.values, config.tau_start, config.top_k);
    let opt_config = TrainConfig {
        learning_rate: config.learning_rate,
        warmup_frac: 0.1,
        ..TrainConfig::default()
    };
    let mut adam = Adam::new(&opt_config, config.steps);
    let order_rng = Rng::seed(seed ^ 0x0D15_EA5E);

    let mut loss_trace = Vec::with_capacity(config.steps);
    let mut trajectory = Vec::new();
    for step in 0..config.steps {
        let mut step_rng = order_rng.fork(step as u64);
        let trial_ids: Vec<usize> = (0..config.batch_size)
            .map(|_| step_rng.below(dataset.len()))
            .collect();

        struct TrialOut {
            loss: f64,
            grads: Vec<(String, Tensor)>,
        }
        let frozen = params.values.clone();
        let teacher_frozen = teacher.shadow.clone();
        let batch_len = trial_ids.len();
        let results: Vec<Result<TrialOut>> = kernels::map_indexed(batch_len, |i| {
            let trial = &dataset.trials[trial_ids[i]];
            let t_latent = encoder_config.output_len(trial.recording.t_len());
            if t_latent < config.span_length.min(t_latent.max(1)) {
                return Err(Error::InvalidInput("trial too short".into()));
            }
            let span = config.span_length.min(t_latent);
            // resample until the plan masks at least two frames (needed for
            // distractors); bounded so a pathological config still terminates
            let base_seed = seed
                .wrapping_mul(31)
                .wrapping_add((step * batch_len + i) as u64);
            let mut plan = plan_masks(t_latent, config.mask_prob, span, base_seed)?;
            let mut attempts = 0;
            while plan.len() < 2 && attempts < 100 {
                attempts += 1;
                plan = plan_masks(
                    t_latent,
                    config.mask_prob,
                    span,
                    base_seed.wrapping_add(attempts * 0x9E37),
                )?;
            }
            if plan.len() < 2 {
                return Err(Error::NoMaskedFrames);
            }

            match objective {
                Objective::Wav2Vec2 => {
                    let mut fwd = forward(
                        encoder_config,
                        &frozen,
                        &trial.recording,
                        ForwardOpts {
                            zscore: config.zscore,
                            trainable: true,
                            dropout: false,
                            dropout_seed: 0,
                            mask: Some(MaskSpec {
                                indices: &plan.indices,
                            }),
                        },
                    )?;
                    // quantized targets from the unmasked latent at masked rows
                    let latent = fwd.latent;
                    let latent_masked = fwd.graph.gather_rows(latent, &plan.indices)?;
                    let vectors = fwd.bind_extra(&frozen, "pretrain.codebook")?;
                    let (codes, diversity) = quantize_on_graph(
                        &mut fwd.graph,
                        latent_masked,
                        vectors,
                        config.groups,
                        config.entries,
                        config.gumbel_temperature,
                        base_seed ^ 0xABCD,
                    )?;
                    // context from the trunk at the same rows
                    let trunk = *fwd.block_outputs.last().expect("blocks >= 1");
                    let context = fwd.graph.gather_rows(trunk, &plan.indices)?;
                    let pcw = fwd.bind_extra(&frozen, "pretrain.proj_c.w")?;
                    let pcb = fwd.bind_extra(&frozen, "pretrain.proj_c.b")?;
                    let pqw = fwd.bind_extra(&frozen, "pretrain.proj_q.w")?;
                    let pqb = fwd.bind_extra(&frozen, "pretrain.proj_q.b")?;
                    let g = &mut fwd.graph;
                    let c0 = g.matmul(context, pcw)?;
                    let c = g.add_row(c0, pcb)?;
                    let q0 = g.matmul(codes, pqw)?;
                    let q = g.add_row(q0, pqb)?;
                    let mut dist_rng = Rng::seed(base_seed ^ 0x5EED);
                    let distractors =
                        sample_distractors(plan.len(), config.distractors, &mut dist_rng)?;
                    let contrastive = contrastive_on_graph(g, c, q, &distractors, config.kappa)?;
                    let weighted = g.scale(diversity, config.diversity_weight)?;
                    let loss = g.add(contrastive, weighted)?;
                    let value = g.value(loss).scalar_value()?;
                    let mut grads = g.backward(loss)?;
                    Ok(TrialOut {
                        loss: value,
                        grads: fwd.collect_grads(&mut grads),
                    })
                }
                Objective::Data2Vec => {
                    let targets_full = data2vec_targets(
                        encoder_config,
                        &teacher_frozen,
                        &trial.recording,
                        config.top_k,
                        config.zscore,
                    )?;
                    let mut fwd = forward(
                        encoder_config,
                        &frozen,
                        &trial.recording,
                        ForwardOpts {
                            zscore: config.zscore,
                            trainable: true,
                            dropout: false,
                            dropout_seed: 0,
                            mask: Some(MaskSpec {
                                indices: &plan.indices,
                            }),
                        },
                    )?;
                    let trunk = *fwd.block_outputs.last().expect("blocks >= 1");
                    let student = fwd.graph.gather_rows(trunk, &plan.indices)?;
                    let rw = fwd.bind_extra(&frozen, "pretrain.reg.w")?;
                    let rb = fwd.bind_extra(&frozen, "pretrain.reg.b")?;
                    let g = &mut fwd.graph;
                    let pred0 = g.matmul(student, rw)?;
                    let pred = g.add_row(pred0, rb)?;
                    let gathered_targets = gather_tensor_rows(&targets_full, &plan.indices)?;
                    let tgt = g.constant(gathered_targets);
                    let loss = g.smooth_l1(pred, tgt, config.beta)?;
                    let value = g.value(loss).scalar_value()?;
                    let mut grads = g.backward(loss)?;
                    Ok(TrialOut {
                        loss: value,
                        grads: fwd.collect_grads(&mut grads),
                    })
                }
            }
        });

        let mut batch_loss = 0.0;
        let mut merged: std::collections::BTreeMap<String, Tensor> =
            std::collections::BTreeMap::new();
        for result in results {
            let out = result?;
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
        // mean over the batch
        for g in merged.values_mut() {
            for v in g.data_mut() {
                *v /= batch_len as f64;
            }
        }
        let grads: Vec<(String, Tensor)> = merged.into_iter().collect();
        adam.update(&mut params.values, &grads)?;
        if objective == Objective::Data2Vec {
            ema_update(&mut teacher, &params.values, config.tau_at(step))?;
        }
        loss_trace.push(batch_loss);
        if config.record_trajectory {
            trajectory.push((params.values.clone(), teacher.shadow.clone()));
        }
    }

    Ok(PretrainOutcome {
        params,
        loss_trace,
        trajectory,
    })
}

fn gather_tensor_rows(t: &Tensor, indices: &[usize]) -> Result<Tensor> {
    let (rows, cols) = t.dims2()?;
    let mut data = Vec::with_capacity(indices.len() * cols);
    for &i in indices {
        if i >= rows {
            return Err(Error::Range(format!("row {i} >= {rows}")));
        }
        data.extend_from_slice(&t.data()[i * cols..(i + 1) * cols]);
    }
    Tensor::new(vec![indices.len(), cols], data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::Family;
    use crate::signals::{generate_synthetic, Split, SynthConfig, TextSource};

    fn tiny_encoder() -> EncoderConfig {
        EncoderConfig {
            family: Family::Conformer,
            blocks: 1,
            model_dim: 16,
            heads: 2,
            conv_kernel: 3,
            subsample_factor: 2,
            in_channels: 4,
            vocab_size: 29,
            dropout: 0.0,
        }
    }

    fn tiny_dataset(seed: u64) -> Dataset {
        let cfg = SynthConfig {
            channels: 4,
            sample_rate_hz: 128.0,
            snr: 20.0,
            d_min: 6,
            d_max: 10,
            trials: 12,
            text: TextSource::Random {
                words_min: 2,
                words_max: 3,
                word_len_min: 3,
                word_len_max: 5,
            },
            amplitude: 1.0,
            source: crate::signals::Source::Eeg,
            template_seed: 0,
        };
        generate_synthetic(&cfg, seed, Split::Train).unwrap()
    }

    fn quick_config() -> PretrainConfig {
        PretrainConfig {
            steps: 12,
            batch_size: 2,
            span_length: 3,
            mask_prob: 0.2,
            distractors: 4,
            entries: 8,
            top_k: 1,
            ..PretrainConfig::default()
        }
    }

    #[test]
    fn wav2vec2_runs_and_is_deterministic() {
        let ds = tiny_dataset(1);
        let run = || {
            pretrain_run(&ds, &tiny_encoder(), Objective::Wav2Vec2, &quick_config(), 5)
                .unwrap()
                .loss_trace
        };
        let a = run();
        assert_eq!(a.len(), 12);
        assert!(a.iter().all(|l| l.is_finite() && *l >= 0.0));
        assert_eq!(a, run());
    }

    #[test]
    fn data2vec_runs_and_is_deterministic() {
        let ds = tiny_dataset(2);
        let run = || {
            pretrain_run(&ds, &tiny_encoder(), Objective::Data2Vec, &quick_config(), 6)
                .unwrap()
                .loss_trace
        };
        let a = run();
        assert_eq!(a.len(), 12);
        assert!(a.iter().all(|l| l.is_finite() && *l >= 0.0));
        assert_eq!(a, run());
    }

    #[test]
    fn zero_mask_prob_raises_no_masked_frames() {
        let ds = tiny_dataset(3);
        let config = PretrainConfig {
            mask_prob: 0.0,
            ..quick_config()
        };
        for objective in [Objective::Wav2Vec2, Objective::Data2Vec] {
            assert!(matches!(
                pretrain_run(&ds, &tiny_encoder(), objective, &config, 1),
                Err(Error::NoMaskedFrames)
            ));
        }
    }

    #[test]
    fn teacher_matches_offline_ema_recomputation() {
        let ds = tiny_dataset(4);
        let config = PretrainConfig {
            record_trajectory: true,
            steps: 8,
            ..quick_config()
        };
        let out =
            pretrain_run(&ds, &tiny_encoder(), Objective::Data2Vec, &config, 9).unwrap();
        // offline: teacher_0 = student_init; teacher_{t+1} = tau_t * teacher_t + (1 - tau_t) * student_{t+1}
        // trajectory[t] = (student after step t, teacher after step t)
        let mut shadow: Option<ParamSet> = None;
        for (step, (student, teacher)) in out.trajectory.iter().enumerate() {
            let tau = config.tau_at(step);
            let prev = match shadow.take() {
                // before the first update the teacher equals the initial
                // student; reconstruct it from the recorded pair
                None => {
                    // teacher_after = tau * teacher_init + (1 - tau) * student_after
                    // solve for teacher_init to seed the recomputation
                    let mut init = teacher.clone();
                    for (name, t) in init.iter_mut() {
                        let s = student.get(name).unwrap();
                        for (tv, &sv) in t.data_mut().iter_mut().zip(s.data()) {
                            *tv = (*tv - (1.0 - tau) * sv) / tau;
                        }
                    }
                    init
                }
                Some(p) => p,
            };
            let mut recomputed = prev.clone();
            for (name, t) in recomputed.iter_mut() {
                let s = student.get(name).unwrap();
                for (tv, &sv) in t.data_mut().iter_mut().zip(s.data()) {
                    *tv = tau * *tv + (1.0 - tau) * sv;
                }
            }
            for (name, t) in teacher.iter() {
                let r = recomputed.get(name).unwrap();
                for (a, b) in t.data().iter().zip(r.data()) {
                    assert!((a - b).abs() < 1e-6, "step {step} param {name}");
                }
            }
            shadow = Some(recomputed);
        }
    }

    #[test]
    fn masked_positions_hurt_more_than_unmasked_at_init() {
        // student error at masked positions should exceed unmasked error at
        // initialization, because masked frames lost their input
        let ds = tiny_dataset(5);
        let enc = tiny_encoder();
        let config = quick_config();
        let seed = 3u64;
        let mut params = init_params(&enc, seed).unwrap();
        let mut aux = Rng::seed(seed ^ 0x00C0_FFEE);
        params.values.insert(
            "pretrain.mask_emb",
            Tensor::fan_in_uniform(vec![16], 16, &mut aux),
        );

        let mut masked_err = 0.0;
        let mut unmasked_err = 0.0;
        let mut count = 0;
        for trial in ds.trials.iter().take(6) {
            let t_latent = enc.output_len(trial.recording.t_len());
            let plan = plan_masks(t_latent, 0.3, 3, 7).unwrap();
            if plan.len() < 2 || plan.len() >= t_latent {
                continue;
            }
            let targets =
                data2vec_targets(&enc, &params.values, &trial.recording, config.top_k, true)
                    .unwrap();
            let fwd = forward(
                &enc,
                &params.values,
                &trial.recording,
                ForwardOpts {
                    zscore: true,
                    mask: Some(MaskSpec {
                        indices: &plan.indices,
                    }),
                    ..ForwardOpts::default()
                },
            )
            .unwrap();
            let trunk = *fwd.block_outputs.last().unwrap();
            let student = fwd.graph.value(trunk);
            let d = student.shape()[1];
            let err_at = |rows: &[usize]| -> f64 {
                let mut acc = 0.0;
                for &r in rows {
                    for c in 0..d {
                        let diff = student.data()[r * d + c] - targets.data()[r * d + c];
                        acc += diff * diff;
                    }
                }
                acc / (rows.len() * d) as f64
            };
            masked_err += err_at(&plan.indices);
            unmasked_err += err_at(&plan.unmasked(t_latent));
            count += 1;
        }
        assert!(count > 0);
        assert!(
            masked_err > unmasked_err,
            "masked {masked_err} vs unmasked {unmasked_err}"
        );
    }
}
