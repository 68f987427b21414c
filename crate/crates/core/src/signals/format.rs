//! Manifest JSON-lines plus headerless f32 little-endian channel-major payloads.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

use super::{Dataset, RawRecording, Source, Split, Trial, WordEvent};

#[derive(Serialize, Deserialize)]
struct ManifestLine {
    id: String,
    text: String,
    signal_file: String,
    channels: usize,
    sample_rate_hz: f64,
    source: Source,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    word_events: Option<Vec<WordEvent>>,
}

/// Load a dataset from a JSON-lines manifest. Signal files resolve relative
/// to the manifest's directory; every payload is shape-checked against the
/// declared channel count and scanned for non-finite values.
pub fn load_dataset(manifest_path: &Path, split: Split) -> Result<Dataset> {
    let text = fs::read_to_string(manifest_path).map_err(|e| Error::io(manifest_path, e))?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let mut trials = Vec::new();
    let mut source: Option<Source> = None;
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        let entry: ManifestLine = serde_json::from_str(line).map_err(|e| {
            Error::Format(format!(
                "{}:{}: bad manifest line: {e}",
                manifest_path.display(),
                lineno + 1
            ))
        })?;
        if entry.channels == 0 || !(entry.sample_rate_hz > 0.0) {
            return Err(Error::Format(format!(
                "{}:{}: channels {} / sample rate {} invalid",
                manifest_path.display(),
                lineno + 1,
                entry.channels,
                entry.sample_rate_hz
            )));
        }
        match source {
            None => source = Some(entry.source),
            Some(s) if s != entry.source => {
                return Err(Error::Data(format!(
                    "{}:{}: mixed sources in one dataset ({s} then {})",
                    manifest_path.display(),
                    lineno + 1,
                    entry.source
                )));
            }
            _ => {}
        }
        let signal_path = base.join(&entry.signal_file);
        let bytes = fs::read(&signal_path).map_err(|e| Error::io(&signal_path, e))?;
        if bytes.len() % 4 != 0 || bytes.len() / 4 % entry.channels != 0 || bytes.is_empty() {
            return Err(Error::Format(format!(
                "{}: {} bytes is not a whole number of f32 frames across {} channels",
                signal_path.display(),
                bytes.len(),
                entry.channels
            )));
        }
        let samples: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        if samples.iter().any(|v| v.is_nan()) {
            return Err(Error::Data(format!(
                "{}: NaN sample in payload",
                signal_path.display()
            )));
        }
        if samples.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data(format!(
                "{}: non-finite sample in payload",
                signal_path.display()
            )));
        }
        if crate::tokenizers::normalize(&entry.text).is_err() {
            return Err(Error::Data(format!(
                "{}:{}: text normalizes to empty",
                manifest_path.display(),
                lineno + 1
            )));
        }
        let word_events = entry.word_events.unwrap_or_default();
        for ev in &word_events {
            ev.check()?;
        }
        trials.push(Trial {
            id: entry.id,
            recording: RawRecording::new(
                entry.channels,
                entry.sample_rate_hz,
                samples,
                entry.source,
            )?,
            text: entry.text,
            word_events,
        });
    }
    Ok(Dataset {
        trials,
        split,
        provenance: manifest_path.display().to_string(),
    })
}

/// Write `manifest.jsonl` plus one `signals/<id>.f32` payload per trial.
/// Returns the manifest path.
pub fn save_dataset(dataset: &Dataset, dir: &Path) -> Result<PathBuf> {
    let signals_dir = dir.join("signals");
    fs::create_dir_all(&signals_dir).map_err(|e| Error::io(&signals_dir, e))?;
    let manifest_path = dir.join("manifest.jsonl");
    let mut manifest =
        fs::File::create(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    for trial in &dataset.trials {
        let rel = format!("signals/{}.f32", trial.id);
        let signal_path = dir.join(&rel);
        let mut bytes = Vec::with_capacity(trial.recording.samples.len() * 4);
        for &v in &trial.recording.samples {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        fs::write(&signal_path, bytes).map_err(|e| Error::io(&signal_path, e))?;
        let line = ManifestLine {
            id: trial.id.clone(),
            text: trial.text.clone(),
            signal_file: rel,
            channels: trial.recording.channels,
            sample_rate_hz: trial.recording.sample_rate_hz,
            source: trial.recording.source,
            word_events: if trial.word_events.is_empty() {
                None
            } else {
                Some(trial.word_events.clone())
            },
        };
        let json = serde_json::to_string(&line)
            .map_err(|e| Error::Format(format!("manifest serialization: {e}")))?;
        writeln!(manifest, "{json}").map_err(|e| Error::io(&manifest_path, e))?;
    }
    Ok(manifest_path)
}
