//! Epoch loop with dev evaluation, best-checkpoint keeping, and flag logging.

use serde::{Deserialize, Serialize};

use crate::ctc::greedy_decode;
use crate::encoders::{
    check_compatible, forward, init_params, EncoderConfig, EncoderParams, ForwardOpts,
};
use crate::metrics::{wer_corpus, EditUnit};
use crate::numerics::Rng;
use crate::signals::Dataset;
use crate::tokenizers::{decode_chars, encode_chars, encode_phonemes, normalize, Lexicon,
    TokenSequence, Vocabulary};
use crate::{Error, Result};

use super::{train_step, Adam, DiagnosticFlag, FlagKind, TrainConfig};

/// Which tokenizer produces CTC targets and renders hypotheses.
#[derive(Clone, Copy, Debug)]
pub enum TokenizationSpec<'a> {
    Character,
    Phoneme(&'a Lexicon),
}

impl TokenizationSpec<'_> {
    pub fn vocabulary(&self) -> std::sync::Arc<Vocabulary> {
        match self {
            TokenizationSpec::Character => Vocabulary::character(),
            TokenizationSpec::Phoneme(_) => Vocabulary::phoneme(),
        }
    }

    pub fn encode(&self, text: &str) -> Result<TokenSequence> {
        let normalized = normalize(text)?;
        match self {
            TokenizationSpec::Character => encode_chars(&normalized),
            TokenizationSpec::Phoneme(lexicon) => {
                Ok(encode_phonemes(&normalized, lexicon)?.tokens)
            }
        }
    }

    /// Text rendering used on both sides of the metric comparison: raw
    /// characters for the character tokenizer, hyphen-joined phonemes with
    /// boundary tokens as spaces for the phoneme tokenizer.
    pub fn render(&self, ids: &[usize]) -> Result<String> {
        match self {
            TokenizationSpec::Character => decode_chars(ids),
            TokenizationSpec::Phoneme(_) => {
                let seq = TokenSequence::new(ids.to_vec(), Vocabulary::phoneme())?;
                Ok(seq.to_text())
            }
        }
    }
}

/// Encode every trial's text.
pub fn prepare_targets(dataset: &Dataset, spec: &TokenizationSpec<'_>) -> Result<Vec<TokenSequence>> {
    dataset.trials.iter().map(|t| spec.encode(&t.text)).collect()
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EpochEval {
    pub epoch: usize,
    pub mean_train_loss: f64,
    pub dev_cer: f64,
    pub dev_wer: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum RunStatus {
    Completed,
    Failed,
}

#[derive(Debug)]
pub struct FitReport {
    /// Best-dev parameters (final parameters when the run failed early).
    pub params: EncoderParams,
    /// Per-step batch mean of per-character CTC loss.
    pub loss_trace: Vec<f64>,
    pub flags: Vec<DiagnosticFlag>,
    pub epochs: Vec<EpochEval>,
    pub status: RunStatus,
    pub steps_run: usize,
    /// Train trials dropped because their target cannot align (too short).
    pub infeasible_trials: usize,
}

/// Supervised CTC training over train/dev splits. Deterministic per seed.
pub fn fit(
    train: &Dataset,
    dev: &Dataset,
    encoder_config: &EncoderConfig,
    config: &TrainConfig,
    tokenization: &TokenizationSpec<'_>,
    initial: Option<EncoderParams>,
) -> Result<FitReport> {
    encoder_config.validate()?;
    config.validate()?;
    if train.is_empty() || dev.is_empty() {
        return Err(Error::InvalidInput("train and dev splits must be non-empty".into()));
    }
    let vocab = tokenization.vocabulary();
    if vocab.len() != encoder_config.vocab_size {
        return Err(Error::Config(format!(
            "vocab size {} vs encoder vocab_size {}",
            vocab.len(),
            encoder_config.vocab_size
        )));
    }

    let train_targets = prepare_targets(train, tokenization)?;
    let dev_targets = prepare_targets(dev, tokenization)?;

    // drop trials whose target cannot align with the lattice length
    let mut usable: Vec<usize> = Vec::with_capacity(train.len());
    for (i, target) in train_targets.iter().enumerate() {
        let t_latent = encoder_config.output_len(train.trials[i].recording.t_len());
        let adjacent = target.ids.windows(2).filter(|w| w[0] == w[1]).count();
        if t_latent >= target.len() + adjacent {
            usable.push(i);
        }
    }
    let infeasible_trials = train.len() - usable.len();
    if usable.is_empty() {
        return Err(Error::InvalidInput(
            "no train trial has a feasible target alignment".into(),
        ));
    }

    let mut params = match initial {
        Some(p) => {
            check_compatible(encoder_config, &p.values)?;
            p
        }
        None => init_params(encoder_config, config.seed)?,
    };

    let steps_per_epoch = usable.len().div_ceil(config.batch_size);
    let total_steps = steps_per_epoch * config.epochs;
    let mut adam = Adam::new(config, total_steps);
    let shuffle_rng = Rng::seed(config.seed ^ 0x5A5A_5A5A);

    let mut loss_trace: Vec<f64> = Vec::with_capacity(total_steps);
    let mut flags: Vec<DiagnosticFlag> = Vec::new();
    let mut epochs: Vec<EpochEval> = Vec::new();
    let mut status = RunStatus::Completed;
    let mut best: Option<(f64, EncoderParams)> = None;
    let mut skipped_steps = 0usize;
    let mut step = 0usize;
    let mut last_watchdog: Option<FlagKind> = None;

    'run: for epoch in 0..config.epochs {
        let mut order = usable.clone();
        shuffle_rng.fork(epoch as u64).shuffle(&mut order);
        let mut epoch_losses = Vec::with_capacity(steps_per_epoch);
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<_> = chunk
                .iter()
                .map(|&i| (&train.trials[i].recording, &train_targets[i]))
                .collect();
            let out = train_step(&mut params.values, &mut adam, encoder_config, &batch, config, step)?;
            flags.extend(out.flags.iter().cloned());
            if let Some(loss) = out.loss {
                loss_trace.push(loss);
                epoch_losses.push(loss);
            }
            if out.skipped {
                skipped_steps += 1;
            }
            step += 1;

            // watchdog over the most recent window
            let window_start = loss_trace.len().saturating_sub(config.watchdog_window);
            let kinds = super::watchdog(&loss_trace[window_start..], config);
            for kind in &kinds {
                if last_watchdog != Some(*kind) {
                    flags.push(DiagnosticFlag {
                        kind: *kind,
                        step,
                        payload: "watchdog".into(),
                    });
                }
            }
            last_watchdog = kinds.first().copied().or(last_watchdog);

            let hard = kinds
                .iter()
                .any(|k| matches!(k, FlagKind::LossHighHard | FlagKind::NonFiniteLoss));
            if out.abort || (hard && config.fail_on_hard) || skipped_steps > config.max_skipped_steps
            {
                status = RunStatus::Failed;
                break 'run;
            }
        }

        let (dev_cer, dev_wer) = evaluate(dev, &dev_targets, encoder_config, &params, config, tokenization)?;
        let mean_train_loss = if epoch_losses.is_empty() {
            f64::NAN
        } else {
            epoch_losses.iter().sum::<f64>() / epoch_losses.len() as f64
        };
        epochs.push(EpochEval {
            epoch,
            mean_train_loss,
            dev_cer,
            dev_wer,
        });
        if best.as_ref().map_or(true, |(c, _)| dev_cer < *c) {
            best = Some((dev_cer, params.clone()));
        }
    }

    if status == RunStatus::Failed && flags.is_empty() {
        // every failure path must carry at least one flag
        flags.push(DiagnosticFlag {
            kind: FlagKind::NonFiniteLoss,
            step,
            payload: "failed without a specific flag".into(),
        });
    }

    let final_params = match (&status, best) {
        (RunStatus::Completed, Some((_, p))) => p,
        _ => params,
    };
    Ok(FitReport {
        params: final_params,
        loss_trace,
        flags,
        epochs,
        status,
        steps_run: step,
        infeasible_trials,
    })
}

/// Greedy-decode the dev split and score CER/WER against rendered targets.
fn evaluate(
    dev: &Dataset,
    dev_targets: &[TokenSequence],
    encoder_config: &EncoderConfig,
    params: &EncoderParams,
    config: &TrainConfig,
    tokenization: &TokenizationSpec<'_>,
) -> Result<(f64, f64)> {
    let outputs: Vec<Result<String>> = crate::numerics::kernels::map_indexed(dev.len(), |i| {
        let fwd = forward(
            encoder_config,
            &params.values,
            &dev.trials[i].recording,
            ForwardOpts {
                zscore: config.zscore,
                ..ForwardOpts::default()
            },
        )?;
        let ids = greedy_decode(&fwd.lattice()?)?;
        tokenization.render(&ids)
    });
    let mut hyps = Vec::with_capacity(dev.len());
    let mut refs = Vec::with_capacity(dev.len());
    for (i, out) in outputs.into_iter().enumerate() {
        hyps.push(out?);
        refs.push(tokenization.render(&dev_targets[i].ids)?);
    }
    let hyp_refs: Vec<&str> = hyps.iter().map(String::as_str).collect();
    let ref_refs: Vec<&str> = refs.iter().map(String::as_str).collect();
    let cer = wer_corpus(&hyp_refs, &ref_refs, EditUnit::Char)?;
    let wer = wer_corpus(&hyp_refs, &ref_refs, EditUnit::Word)?;
    Ok((cer, wer))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::Family;
    use crate::signals::{generate_synthetic, Split, SynthConfig, TextSource};
    use crate::trainer::FaultInjection;

    fn small_encoder() -> EncoderConfig {
        EncoderConfig {
            family: Family::Conformer,
            blocks: 1,
            model_dim: 32,
            heads: 4,
            conv_kernel: 7,
            subsample_factor: 4,
            in_channels: 4,
            vocab_size: 29,
            dropout: 0.0,
        }
    }

    fn synth(trials: usize, seed: u64, split: Split) -> Dataset {
        let cfg = SynthConfig {
            channels: 4,
            sample_rate_hz: 128.0,
            snr: 50.0,
            d_min: 8,
            d_max: 12,
            trials,
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
        generate_synthetic(&cfg, seed, split).unwrap()
    }

    #[test]
    fn overfits_a_small_set() {
        let train = synth(30, 1, Split::Train);
        let dev = synth(8, 2, Split::Dev);
        let config = TrainConfig {
            learning_rate: 3e-3,
            batch_size: 8,
            epochs: 30,
            seed: 3,
            dropout: false,
            ..TrainConfig::default()
        };
        let report = fit(
            &train,
            &dev,
            &small_encoder(),
            &config,
            &TokenizationSpec::Character,
            None,
        )
        .unwrap();
        assert_eq!(report.status, RunStatus::Completed);
        let initial = report.loss_trace[0];
        let final_mean = report.loss_trace[report.loss_trace.len() - 4..]
            .iter()
            .sum::<f64>()
            / 4.0;
        assert!(
            final_mean < 0.3 * initial,
            "initial {initial}, final {final_mean}"
        );
    }

    #[test]
    fn loss_trace_is_deterministic_per_seed() {
        let train = synth(12, 5, Split::Train);
        let dev = synth(4, 6, Split::Dev);
        let config = TrainConfig {
            batch_size: 4,
            epochs: 2,
            seed: 9,
            ..TrainConfig::default()
        };
        let run = || {
            fit(
                &train,
                &dev,
                &small_encoder(),
                &config,
                &TokenizationSpec::Character,
                None,
            )
            .unwrap()
            .loss_trace
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn injected_lattice_fault_fails_with_negative_ctc_flag() {
        let train = synth(8, 7, Split::Train);
        let dev = synth(4, 8, Split::Dev);
        let config = TrainConfig {
            batch_size: 4,
            epochs: 2,
            seed: 1,
            fault: Some(FaultInjection::LatticeAdd(0.5)),
            ..TrainConfig::default()
        };
        let report = fit(
            &train,
            &dev,
            &small_encoder(),
            &config,
            &TokenizationSpec::Character,
            None,
        )
        .unwrap();
        assert_eq!(report.status, RunStatus::Failed);
        assert!(report
            .flags
            .iter()
            .any(|f| matches!(f.kind, FlagKind::NegativeCtcInput)));
    }

    #[test]
    fn failed_runs_always_carry_flags() {
        let train = synth(8, 7, Split::Train);
        let dev = synth(4, 8, Split::Dev);
        // explosion recipe: no clipping, huge lr
        let config = TrainConfig {
            learning_rate: 3e-2,
            clip_norm: None,
            batch_size: 4,
            epochs: 50,
            seed: 2,
            ..TrainConfig::default()
        };
        let report = fit(
            &train,
            &dev,
            &small_encoder(),
            &config,
            &TokenizationSpec::Character,
            None,
        )
        .unwrap();
        if report.status == RunStatus::Failed {
            assert!(!report.flags.is_empty());
        }
    }

    #[test]
    fn phoneme_tokenization_trains_too() {
        let train = synth(8, 11, Split::Train);
        let dev = synth(4, 12, Split::Dev);
        let lexicon = Lexicon::default();
        let enc = EncoderConfig {
            vocab_size: 41,
            ..small_encoder()
        };
        let config = TrainConfig {
            batch_size: 4,
            epochs: 1,
            seed: 1,
            ..TrainConfig::default()
        };
        let report = fit(
            &train,
            &dev,
            &enc,
            &config,
            &TokenizationSpec::Phoneme(&lexicon),
            None,
        )
        .unwrap();
        assert!(report.steps_run > 0);
        assert!(report.epochs[0].dev_cer.is_finite());
    }
}
