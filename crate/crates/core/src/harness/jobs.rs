//! Single-run job configs backing the CLI subcommands.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::ctc::{beam_decode, greedy_decode};
use crate::encoders::{forward, EncoderConfig, EncoderParams, ForwardOpts};
use crate::metrics::{score_corpus, MetricsReport};
use crate::numerics::{load_checkpoint, ParamSet};
use crate::pretrain::{pretrain_run, Objective, PretrainConfig, PretrainOutcome};
use crate::signals::{load_dataset, Dataset, Split};
use crate::tokenizers::{load_lexicon, Lexicon};
use crate::trainer::{fit, FitReport, TokenizationSpec, TrainConfig};
use crate::Result;

use super::{DataSource, ModalityData, Tokenization};

fn realize(source: &DataSource, split: Split) -> Result<Dataset> {
    match source {
        DataSource::Manifest(path) => load_dataset(path, split),
        DataSource::Synth { config, seed } => {
            crate::signals::generate_synthetic(config, *seed, split)
        }
    }
}

fn lexicon_opt(path: &Option<PathBuf>) -> Result<Lexicon> {
    match path {
        Some(p) => load_lexicon(p),
        None => Ok(Lexicon::default()),
    }
}

fn with_data_shape(
    encoder: &EncoderConfig,
    dataset: &Dataset,
    tokenization: Tokenization,
) -> EncoderConfig {
    EncoderConfig {
        in_channels: dataset
            .trials
            .first()
            .map(|t| t.recording.channels)
            .unwrap_or(encoder.in_channels),
        vocab_size: tokenization.vocab_size(),
        ..encoder.clone()
    }
}

/// Config file schema for `train`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainJob {
    #[serde(default)]
    pub encoder: EncoderConfig,
    #[serde(default)]
    pub train: TrainConfig,
    pub tokenization: Tokenization,
    pub data: ModalityData,
    #[serde(default)]
    pub lexicon: Option<PathBuf>,
    /// Warm start, e.g. from a pretraining checkpoint.
    #[serde(default)]
    pub init_checkpoint: Option<PathBuf>,
}

pub fn train_job(job: &TrainJob, seed: Option<u64>) -> Result<FitReport> {
    let train_ds = realize(&job.data.train, Split::Train)?;
    let dev_ds = realize(&job.data.dev, Split::Dev)?;
    let lexicon = lexicon_opt(&job.lexicon)?;
    let encoder = with_data_shape(&job.encoder, &train_ds, job.tokenization);
    let mut train = job.train.clone();
    if let Some(seed) = seed {
        train.seed = seed;
    }
    let tok_spec = match job.tokenization {
        Tokenization::Character => TokenizationSpec::Character,
        Tokenization::Phoneme => TokenizationSpec::Phoneme(&lexicon),
    };
    let initial = match &job.init_checkpoint {
        Some(path) => Some(EncoderParams {
            values: load_checkpoint(path)?,
            seed: train.seed,
        }),
        None => None,
    };
    fit(&train_ds, &dev_ds, &encoder, &train, &tok_spec, initial)
}

/// Config file schema for `pretrain`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PretrainJob {
    #[serde(default)]
    pub encoder: EncoderConfig,
    #[serde(default)]
    pub pretrain: PretrainConfig,
    pub objective: Objective,
    pub data: DataSource,
    /// Tokenization only fixes the head width; pretraining ignores targets.
    #[serde(default = "default_tokenization")]
    pub tokenization: Tokenization,
}

fn default_tokenization() -> Tokenization {
    Tokenization::Character
}

pub fn pretrain_job(job: &PretrainJob, seed: u64) -> Result<PretrainOutcome> {
    let dataset = realize(&job.data, Split::Train)?;
    let encoder = with_data_shape(&job.encoder, &dataset, job.tokenization);
    pretrain_run(&dataset, &encoder, job.objective, &job.pretrain, seed)
}

/// Config file schema for `decode`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DecodeJob {
    #[serde(default)]
    pub encoder: EncoderConfig,
    pub checkpoint: PathBuf,
    pub data: DataSource,
    pub tokenization: Tokenization,
    #[serde(default)]
    pub lexicon: Option<PathBuf>,
    /// None decodes greedily; Some(width) runs the prefix beam search.
    #[serde(default)]
    pub beam_width: Option<usize>,
    #[serde(default)]
    pub beam_alpha: Option<f64>,
    #[serde(default = "default_true")]
    pub zscore: bool,
}

fn default_true() -> bool {
    true
}

pub struct DecodeOutput {
    pub hypotheses: Vec<String>,
    pub references: Vec<String>,
    pub metrics: MetricsReport,
}

pub fn decode_job(job: &DecodeJob) -> Result<DecodeOutput> {
    let dataset = realize(&job.data, Split::Test)?;
    let lexicon = lexicon_opt(&job.lexicon)?;
    let encoder = with_data_shape(&job.encoder, &dataset, job.tokenization);
    let params: ParamSet = load_checkpoint(&job.checkpoint)?;
    crate::encoders::check_compatible(&encoder, &params)?;
    let tok_spec = match job.tokenization {
        Tokenization::Character => TokenizationSpec::Character,
        Tokenization::Phoneme => TokenizationSpec::Phoneme(&lexicon),
    };
    let outputs: Vec<Result<String>> =
        crate::numerics::kernels::map_indexed(dataset.len(), |i| {
            let fwd = forward(
                &encoder,
                &params,
                &dataset.trials[i].recording,
                ForwardOpts {
                    zscore: job.zscore,
                    ..ForwardOpts::default()
                },
            )?;
            let lattice = fwd.lattice()?;
            let ids = match job.beam_width {
                Some(width) => beam_decode(&lattice, width, job.beam_alpha)?
                    .into_iter()
                    .next()
                    .map(|h| h.labels)
                    .unwrap_or_default(),
                None => greedy_decode(&lattice)?,
            };
            tok_spec.render(&ids)
        });
    let mut hypotheses = Vec::with_capacity(dataset.len());
    let mut references = Vec::with_capacity(dataset.len());
    for (i, out) in outputs.into_iter().enumerate() {
        hypotheses.push(out?);
        let target = tok_spec.encode(&dataset.trials[i].text)?;
        references.push(tok_spec.render(&target.ids)?);
    }
    let h: Vec<&str> = hypotheses.iter().map(String::as_str).collect();
    let r: Vec<&str> = references.iter().map(String::as_str).collect();
    let metrics = score_corpus(&h, &r)?;
    Ok(DecodeOutput {
        hypotheses,
        references,
        metrics,
    })
}
