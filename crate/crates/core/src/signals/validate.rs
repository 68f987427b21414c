//! Dataset health reporting. Reports, never rejects.

use serde::{Deserialize, Serialize};

use super::Dataset;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrialReport {
    pub id: String,
    /// Fraction of the text's words that carry a word event.
    pub word_coverage: f64,
    /// Recording duration divided by normalized character count.
    pub ms_per_char: f64,
    pub channels: usize,
    pub sample_rate_hz: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ValidationReport {
    pub trials: Vec<TrialReport>,
    pub channels_consistent: bool,
    pub sample_rates_consistent: bool,
    pub mean_word_coverage: f64,
}

impl ValidationReport {
    pub fn has_gaps(&self) -> bool {
        self.trials.iter().any(|t| t.word_coverage < 1.0)
    }
}

/// Per-trial coverage and duration ratios plus cross-trial consistency flags.
pub fn validate_dataset(dataset: &Dataset) -> ValidationReport {
    let mut trials = Vec::with_capacity(dataset.trials.len());
    for trial in &dataset.trials {
        let normalized = crate::tokenizers::normalize(&trial.text).unwrap_or_default();
        let word_count = normalized.split(' ').filter(|w| !w.is_empty()).count();
        let covered = trial
            .word_events
            .iter()
            .filter(|ev| {
                normalized
                    .split(' ')
                    .any(|w| w == ev.word.to_lowercase())
            })
            .count()
            .min(word_count);
        let chars = normalized.chars().count().max(1);
        trials.push(TrialReport {
            id: trial.id.clone(),
            word_coverage: if word_count == 0 {
                0.0
            } else {
                covered as f64 / word_count as f64
            },
            ms_per_char: trial.recording.duration_ms() / chars as f64,
            channels: trial.recording.channels,
            sample_rate_hz: trial.recording.sample_rate_hz,
        });
    }
    let channels_consistent = trials.windows(2).all(|w| w[0].channels == w[1].channels);
    let sample_rates_consistent = trials
        .windows(2)
        .all(|w| w[0].sample_rate_hz == w[1].sample_rate_hz);
    let mean_word_coverage = if trials.is_empty() {
        0.0
    } else {
        trials.iter().map(|t| t.word_coverage).sum::<f64>() / trials.len() as f64
    };
    ValidationReport {
        trials,
        channels_consistent,
        sample_rates_consistent,
        mean_word_coverage,
    }
}
