//! Experiment grid: technique x tokenization x modality cells with a rendered
//! comparison table, machine-readable CSV, and per-cell artifacts.

mod grid;
mod jobs;

pub use grid::{run_grid, write_outputs, GridOutcome, RunResult};
pub use jobs::{decode_job, pretrain_job, train_job, DecodeJob, PretrainJob, TrainJob};

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::encoders::{EncoderConfig, Family};
use crate::pretrain::{Objective, PretrainConfig};
use crate::signals::{Source, SynthConfig};
use crate::trainer::TrainConfig;
use crate::{Error, Result};

/// Row label of the comparison table; determines encoder family and optional
/// pretraining objective.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Technique {
    Ctc,
    #[serde(rename = "data2vec")]
    Data2Vec,
    #[serde(rename = "wav2vec2")]
    Wav2Vec2,
    Bendr,
    EegConformer,
}

impl Technique {
    pub const ALL: [Technique; 5] = [
        Technique::Ctc,
        Technique::Data2Vec,
        Technique::Wav2Vec2,
        Technique::Bendr,
        Technique::EegConformer,
    ];

    /// Scenario grouping in the rendered table.
    pub fn scenario(&self) -> &'static str {
        match self {
            Technique::Ctc => "CTC",
            Technique::Data2Vec | Technique::Wav2Vec2 => "Generic Algorithms",
            Technique::Bendr | Technique::EegConformer => "Brain Encoders",
        }
    }

    pub fn family(&self) -> Family {
        match self {
            Technique::Ctc | Technique::Data2Vec | Technique::Wav2Vec2 => Family::Conformer,
            Technique::Bendr => Family::Bendr,
            Technique::EegConformer => Family::EegConformer,
        }
    }

    pub fn objective(&self) -> Option<Objective> {
        match self {
            Technique::Data2Vec => Some(Objective::Data2Vec),
            Technique::Wav2Vec2 => Some(Objective::Wav2Vec2),
            _ => None,
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            Technique::Ctc => "CTC",
            Technique::Data2Vec => "Data2Vec",
            Technique::Wav2Vec2 => "Wav2Vec2",
            Technique::Bendr => "Bendr",
            Technique::EegConformer => "EEG-Conformer",
        }
    }
}

impl std::fmt::Display for Technique {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Technique::Ctc => "ctc",
            Technique::Data2Vec => "data2vec",
            Technique::Wav2Vec2 => "wav2vec2",
            Technique::Bendr => "bendr",
            Technique::EegConformer => "eeg_conformer",
        };
        write!(f, "{s}")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tokenization {
    Character,
    Phoneme,
}

impl Tokenization {
    pub const ALL: [Tokenization; 2] = [Tokenization::Character, Tokenization::Phoneme];

    pub fn vocab_size(&self) -> usize {
        match self {
            Tokenization::Character => 29,
            Tokenization::Phoneme => 41,
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            Tokenization::Character => "Character",
            Tokenization::Phoneme => "Phoneme",
        }
    }
}

impl std::fmt::Display for Tokenization {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Tokenization::Character => "character",
            Tokenization::Phoneme => "phoneme",
        };
        write!(f, "{s}")
    }
}

/// Where one split's trials come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    /// JSON-lines manifest on disk.
    Manifest(PathBuf),
    /// Synthesized on the fly; the seed offsets the grid seed.
    Synth { config: SynthConfig, seed: u64 },
}

/// Train/dev pair for one modality.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModalityData {
    pub train: DataSource,
    pub dev: DataSource,
}

impl ModalityData {
    /// Default synthetic EEG profile.
    pub fn synth_eeg(train_trials: usize, dev_trials: usize) -> Self {
        let base = SynthConfig {
            channels: 8,
            sample_rate_hz: 256.0,
            source: Source::Eeg,
            ..SynthConfig::default()
        };
        ModalityData {
            train: DataSource::Synth {
                config: SynthConfig {
                    trials: train_trials,
                    ..base.clone()
                },
                seed: 101,
            },
            dev: DataSource::Synth {
                config: SynthConfig {
                    trials: dev_trials,
                    ..base
                },
                seed: 202,
            },
        }
    }

    /// Default synthetic IMA profile: more channels, higher rate.
    pub fn synth_ima(train_trials: usize, dev_trials: usize) -> Self {
        let base = SynthConfig {
            channels: 16,
            sample_rate_hz: 512.0,
            source: Source::Ima,
            ..SynthConfig::default()
        };
        ModalityData {
            train: DataSource::Synth {
                config: SynthConfig {
                    trials: train_trials,
                    ..base.clone()
                },
                seed: 303,
            },
            dev: DataSource::Synth {
                config: SynthConfig {
                    trials: dev_trials,
                    ..base
                },
                seed: 404,
            },
        }
    }
}

/// Per-cell adjustments, primarily for reproducing failure modes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellOverride {
    pub technique: Technique,
    pub tokenization: Tokenization,
    pub modality: Source,
    #[serde(default)]
    pub lr_multiplier: Option<f64>,
    #[serde(default)]
    pub disable_clipping: bool,
    #[serde(default)]
    pub lattice_fault: Option<f64>,
    #[serde(default)]
    pub epochs: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GridSpec {
    pub techniques: Vec<Technique>,
    pub tokenizations: Vec<Tokenization>,
    pub modalities: Vec<Source>,
    pub seeds: Vec<u64>,
    pub eeg: ModalityData,
    pub ima: ModalityData,
    /// Base encoder settings; family, channels, and vocab are set per cell.
    pub encoder: EncoderConfig,
    pub train: TrainConfig,
    pub pretrain: PretrainConfig,
    pub beam_width: usize,
    pub beam_alpha: Option<f64>,
    /// Optional pronunciation lexicon for the phoneme tokenizer; words not
    /// covered fall back to letter names.
    pub lexicon: Option<PathBuf>,
    pub overrides: Vec<CellOverride>,
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec {
            techniques: Technique::ALL.to_vec(),
            tokenizations: Tokenization::ALL.to_vec(),
            modalities: vec![Source::Eeg, Source::Ima],
            seeds: vec![0],
            eeg: ModalityData::synth_eeg(32, 8),
            ima: ModalityData::synth_ima(32, 8),
            encoder: EncoderConfig::default(),
            train: TrainConfig {
                epochs: 2,
                batch_size: 8,
                // synthetic templates are already unit-scale; per-trial
                // z-scoring would distort them per trial
                zscore: false,
                ..TrainConfig::default()
            },
            pretrain: PretrainConfig {
                steps: 30,
                ..PretrainConfig::default()
            },
            beam_width: 8,
            beam_alpha: None,
            lexicon: None,
            overrides: Vec::new(),
        }
    }
}

impl GridSpec {
    pub fn validate(&self) -> Result<()> {
        if self.techniques.is_empty() || self.tokenizations.is_empty() || self.modalities.is_empty()
        {
            return Err(Error::Config("grid cross product is empty".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("need at least one seed".into()));
        }
        if self.beam_width == 0 {
            return Err(Error::Config("beam_width must be >= 1".into()));
        }
        self.train.validate()?;
        Ok(())
    }

    pub fn data_for(&self, modality: Source) -> &ModalityData {
        match modality {
            Source::Eeg => &self.eeg,
            Source::Ima => &self.ima,
        }
    }

    pub fn override_for(
        &self,
        technique: Technique,
        tokenization: Tokenization,
        modality: Source,
    ) -> Option<&CellOverride> {
        self.overrides.iter().find(|o| {
            o.technique == technique && o.tokenization == tokenization && o.modality == modality
        })
    }
}
