//! Data model, on-disk format, validation, and synthesis for sentence-aligned
//! brain recordings.

mod format;
mod synth;
mod validate;

pub use format::{load_dataset, save_dataset};
pub use synth::{generate_synthetic, SynthConfig, TextSource};
pub use validate::{validate_dataset, TrialReport, ValidationReport};

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Recording modality.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    /// Scalp electroencephalography.
    Eeg,
    /// Intracortical microelectrode array.
    Ima,
}

impl fmt::Display for Source {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Source::Eeg => write!(f, "eeg"),
            Source::Ima => write!(f, "ima"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Split::Train => write!(f, "train"),
            Split::Dev => write!(f, "dev"),
            Split::Test => write!(f, "test"),
        }
    }
}

/// Multichannel sampled signal, channel-major (all of channel 0, then 1, ...).
#[derive(Clone, Debug, PartialEq)]
pub struct RawRecording {
    pub channels: usize,
    pub sample_rate_hz: f64,
    pub samples: Vec<f32>,
    pub source: Source,
}

impl RawRecording {
    pub fn new(
        channels: usize,
        sample_rate_hz: f64,
        samples: Vec<f32>,
        source: Source,
    ) -> Result<Self> {
        let rec = RawRecording {
            channels,
            sample_rate_hz,
            samples,
            source,
        };
        rec.check()?;
        Ok(rec)
    }

    fn check(&self) -> Result<()> {
        if self.channels == 0 {
            return Err(Error::Data("recording has zero channels".into()));
        }
        if !(self.sample_rate_hz > 0.0) {
            return Err(Error::Data(format!(
                "sample rate {} must be positive",
                self.sample_rate_hz
            )));
        }
        if self.samples.is_empty() || self.samples.len() % self.channels != 0 {
            return Err(Error::Data(format!(
                "{} samples not divisible into {} channels",
                self.samples.len(),
                self.channels
            )));
        }
        if self.samples.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data("non-finite sample".into()));
        }
        Ok(())
    }

    /// Samples per channel.
    pub fn t_len(&self) -> usize {
        self.samples.len() / self.channels
    }

    pub fn duration_ms(&self) -> f64 {
        self.t_len() as f64 * 1000.0 / self.sample_rate_hz
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let t = self.t_len();
        &self.samples[c * t..(c + 1) * t]
    }
}

/// One word of the reference text with its time span and optional
/// eye-tracking measures (first-fixation, total-reading, gaze, single-fixation,
/// go-past durations).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WordEvent {
    pub word: String,
    pub t_start_ms: f64,
    pub t_end_ms: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ffd_ms: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trt_ms: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gd_ms: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sfd_ms: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gpt_ms: Option<f64>,
}

impl WordEvent {
    pub fn check(&self) -> Result<()> {
        if self.t_start_ms > self.t_end_ms {
            return Err(Error::Format(format!(
                "word '{}': t_start {} > t_end {}",
                self.word, self.t_start_ms, self.t_end_ms
            )));
        }
        for (name, v) in [
            ("ffd_ms", self.ffd_ms),
            ("trt_ms", self.trt_ms),
            ("gd_ms", self.gd_ms),
            ("sfd_ms", self.sfd_ms),
            ("gpt_ms", self.gpt_ms),
        ] {
            if let Some(v) = v {
                if v < 0.0 {
                    return Err(Error::Format(format!(
                        "word '{}': {name} = {v} is negative",
                        self.word
                    )));
                }
            }
        }
        Ok(())
    }
}

/// One sentence-reading/speaking instance. Word events may cover a strict
/// subset of the words; gaps are a dataset property, not an error.
#[derive(Clone, Debug, PartialEq)]
pub struct Trial {
    pub id: String,
    pub recording: RawRecording,
    pub text: String,
    pub word_events: Vec<WordEvent>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub trials: Vec<Trial>,
    pub split: Split,
    pub provenance: String,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.trials.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trials.is_empty()
    }

    pub fn source(&self) -> Option<Source> {
        self.trials.first().map(|t| t.recording.source)
    }
}

/// Sample-accurate window: index = round(t_ms * rate / 1000).
pub fn slice_trial(trial: &Trial, t0_ms: f64, t1_ms: f64) -> Result<RawRecording> {
    let rec = &trial.recording;
    let duration = rec.duration_ms();
    if !(0.0 <= t0_ms && t0_ms < t1_ms && t1_ms <= duration) {
        return Err(Error::Range(format!(
            "slice [{t0_ms}, {t1_ms}] ms outside [0, {duration:.3}] ms or empty"
        )));
    }
    let to_index = |ms: f64| (ms * rec.sample_rate_hz / 1000.0).round() as usize;
    let start = to_index(t0_ms);
    let end = to_index(t1_ms).min(rec.t_len());
    if end <= start {
        return Err(Error::Range(format!(
            "slice [{t0_ms}, {t1_ms}] ms rounds to zero samples"
        )));
    }
    let mut samples = Vec::with_capacity((end - start) * rec.channels);
    for c in 0..rec.channels {
        samples.extend_from_slice(&rec.channel(c)[start..end]);
    }
    RawRecording::new(rec.channels, rec.sample_rate_hz, samples, rec.source)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn trial_with(t: usize, rate: f64) -> Trial {
        let channels = 2;
        let samples: Vec<f32> = (0..channels * t).map(|i| i as f32).collect();
        Trial {
            id: "t0".into(),
            recording: RawRecording::new(channels, rate, samples, Source::Eeg).unwrap(),
            text: "hello".into(),
            word_events: vec![],
        }
    }

    #[test]
    fn full_span_slice_is_identity() {
        let trial = trial_with(100, 100.0);
        let sliced = slice_trial(&trial, 0.0, trial.recording.duration_ms()).unwrap();
        assert_eq!(sliced, trial.recording);
    }

    #[test]
    fn empty_slice_is_range_error() {
        let trial = trial_with(100, 100.0);
        assert!(matches!(
            slice_trial(&trial, 10.0, 10.0),
            Err(Error::Range(_))
        ));
        assert!(matches!(
            slice_trial(&trial, 0.0, 2000.0),
            Err(Error::Range(_))
        ));
    }

    #[test]
    fn one_second_at_512_hz_is_512_samples() {
        let trial = trial_with(1024, 512.0);
        let sliced = slice_trial(&trial, 0.0, 1000.0).unwrap();
        assert_eq!(sliced.t_len(), 512);
    }

    #[test]
    fn adjacent_slices_concatenate_to_original() {
        let trial = trial_with(97, 173.0);
        let duration = trial.recording.duration_ms();
        let mid = duration * 0.37;
        let a = slice_trial(&trial, 0.0, mid).unwrap();
        let b = slice_trial(&trial, mid, duration).unwrap();
        for c in 0..trial.recording.channels {
            let mut joined = a.channel(c).to_vec();
            joined.extend_from_slice(b.channel(c));
            assert_eq!(joined, trial.recording.channel(c));
        }
    }

    #[test]
    fn word_event_check_rejects_bad_spans() {
        let mut ev = WordEvent {
            word: "w".into(),
            t_start_ms: 10.0,
            t_end_ms: 5.0,
            ffd_ms: None,
            trt_ms: None,
            gd_ms: None,
            sfd_ms: None,
            gpt_ms: None,
        };
        assert!(ev.check().is_err());
        ev.t_end_ms = 15.0;
        assert!(ev.check().is_ok());
        ev.ffd_ms = Some(-1.0);
        assert!(ev.check().is_err());
    }

    #[test]
    fn recording_rejects_nan() {
        assert!(matches!(
            RawRecording::new(1, 100.0, vec![f32::NAN], Source::Eeg),
            Err(Error::Data(_))
        ));
    }
}
