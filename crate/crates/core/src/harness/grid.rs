//! Grid execution, table rendering, and artifact emission.

use std::fs;
use std::path::Path;
use std::time::Instant;

use serde::Serialize;

use crate::ctc::{beam_decode, greedy_decode};
use crate::encoders::{forward, EncoderConfig, ForwardOpts};
use crate::metrics::{score_corpus, MetricsReport};
use crate::numerics::kernels;
use crate::pretrain::pretrain_run;
use crate::signals::{generate_synthetic, load_dataset, Dataset, Source, Split};
use crate::tokenizers::{load_lexicon, Lexicon};
use crate::trainer::{fit, prepare_targets, FitReport, RunStatus, TokenizationSpec, TrainConfig};
use crate::{Error, Result};

use super::{DataSource, GridSpec, Technique, Tokenization};

/// One (technique, tokenization, modality, seed) cell.
#[derive(Clone, Debug, Serialize)]
pub struct RunResult {
    pub technique: Technique,
    pub tokenization: Tokenization,
    pub modality: Source,
    pub seed: u64,
    pub status: RunStatus,
    /// Greedy-decoding metrics; absent for failed cells, never fabricated.
    pub metrics: Option<MetricsReport>,
    /// Beam-decoding metrics at the configured width.
    pub beam_metrics: Option<MetricsReport>,
    pub flags: Vec<String>,
    pub loss_trace: Vec<f64>,
    pub pretrain_trace: Vec<f64>,
    pub wall_time_s: f64,
}

impl RunResult {
    pub fn cell_key(&self) -> String {
        format!("{}-{}-{}-s{}", self.technique, self.tokenization, self.modality, self.seed)
    }
}

pub struct GridOutcome {
    pub results: Vec<RunResult>,
    /// Human table in the comparison layout.
    pub table: String,
    /// Machine-readable rows; byte-reproducible under fixed seeds.
    pub csv: String,
}

fn realize(source: &DataSource, split: Split) -> Result<Dataset> {
    match source {
        DataSource::Manifest(path) => load_dataset(path, split),
        DataSource::Synth { config, seed } => generate_synthetic(config, *seed, split),
    }
}

fn load_lexicon_opt(spec: &GridSpec) -> Result<Lexicon> {
    match &spec.lexicon {
        Some(path) => load_lexicon(path),
        None => Ok(Lexicon::default()),
    }
}

/// Run every cell of the grid. Cells execute independently (parallel when the
/// feature is on); results are deterministic per seed and ordered by cell key.
pub fn run_grid(spec: &GridSpec) -> Result<GridOutcome> {
    spec.validate()?;
    let lexicon = load_lexicon_opt(spec)?;

    // datasets are shared per modality
    let mut data: Vec<(Source, Dataset, Dataset)> = Vec::new();
    for &modality in &spec.modalities {
        let md = spec.data_for(modality);
        let train = realize(&md.train, Split::Train)?;
        let dev = realize(&md.dev, Split::Dev)?;
        if train.source() != Some(modality) || dev.source() != Some(modality) {
            return Err(Error::Config(format!(
                "dataset modality does not match the {modality} column"
            )));
        }
        data.push((modality, train, dev));
    }

    let mut cells = Vec::new();
    for &technique in &spec.techniques {
        for &tokenization in &spec.tokenizations {
            for (mi, (modality, _, _)) in data.iter().enumerate() {
                for &seed in &spec.seeds {
                    cells.push((technique, tokenization, *modality, mi, seed));
                }
            }
        }
    }

    let results: Vec<Result<RunResult>> = kernels::map_indexed(cells.len(), |i| {
        let (technique, tokenization, modality, mi, seed) = cells[i];
        let (_, train_ds, dev_ds) = &data[mi];
        run_cell(spec, &lexicon, technique, tokenization, modality, train_ds, dev_ds, seed)
    });
    let mut results: Vec<RunResult> = results.into_iter().collect::<Result<_>>()?;
    results.sort_by_key(|r| {
        (
            Technique::ALL.iter().position(|t| *t == r.technique),
            r.tokenization.label(),
            r.modality.to_string(),
            r.seed,
        )
    });

    let table = render_table(spec, &results);
    let csv = render_csv(&results);
    Ok(GridOutcome {
        results,
        table,
        csv,
    })
}

#[allow(clippy::too_many_arguments)]
fn run_cell(
    spec: &GridSpec,
    lexicon: &Lexicon,
    technique: Technique,
    tokenization: Tokenization,
    modality: Source,
    train_ds: &Dataset,
    dev_ds: &Dataset,
    seed: u64,
) -> Result<RunResult> {
    let start = Instant::now();
    let channels = train_ds
        .trials
        .first()
        .map(|t| t.recording.channels)
        .ok_or_else(|| Error::InvalidInput("empty train dataset".into()))?;

    let encoder = EncoderConfig {
        family: technique.family(),
        in_channels: channels,
        vocab_size: tokenization.vocab_size(),
        ..spec.encoder.clone()
    };
    let mut train_config = TrainConfig {
        seed,
        ..spec.train.clone()
    };
    if let Some(patch) = spec.override_for(technique, tokenization, modality) {
        if let Some(mult) = patch.lr_multiplier {
            train_config.learning_rate *= mult;
        }
        if patch.disable_clipping {
            train_config.clip_norm = None;
        }
        if let Some(delta) = patch.lattice_fault {
            train_config.fault = Some(crate::trainer::FaultInjection::LatticeAdd(delta));
        }
        if let Some(epochs) = patch.epochs {
            train_config.epochs = epochs;
        }
    }

    let tok_spec = match tokenization {
        Tokenization::Character => TokenizationSpec::Character,
        Tokenization::Phoneme => TokenizationSpec::Phoneme(lexicon),
    };

    // optional self-supervised stage
    let mut pretrain_trace = Vec::new();
    let initial = match technique.objective() {
        Some(objective) => {
            let outcome = pretrain_run(train_ds, &encoder, objective, &spec.pretrain, seed)?;
            pretrain_trace = outcome.loss_trace;
            Some(outcome.params)
        }
        None => None,
    };

    let report = fit(train_ds, dev_ds, &encoder, &train_config, &tok_spec, initial)?;
    let flags: Vec<String> = report
        .flags
        .iter()
        .map(|f| format!("{}@{}", f.kind, f.step))
        .collect();

    let (metrics, beam_metrics) = if report.status == RunStatus::Completed {
        let (greedy, beam) = decode_dev(&encoder, &report, dev_ds, &tok_spec, spec)?;
        (Some(greedy), Some(beam))
    } else {
        (None, None)
    };

    Ok(RunResult {
        technique,
        tokenization,
        modality,
        seed,
        status: report.status,
        metrics,
        beam_metrics,
        flags,
        loss_trace: report.loss_trace,
        pretrain_trace,
        wall_time_s: start.elapsed().as_secs_f64(),
    })
}

fn decode_dev(
    encoder: &EncoderConfig,
    report: &FitReport,
    dev_ds: &Dataset,
    tok_spec: &TokenizationSpec<'_>,
    spec: &GridSpec,
) -> Result<(MetricsReport, MetricsReport)> {
    let dev_targets = prepare_targets(dev_ds, tok_spec)?;
    let decoded: Vec<Result<(String, String)>> = kernels::map_indexed(dev_ds.len(), |i| {
        let fwd = forward(
            encoder,
            &report.params.values,
            &dev_ds.trials[i].recording,
            ForwardOpts {
                zscore: spec.train.zscore,
                ..ForwardOpts::default()
            },
        )?;
        let lattice = fwd.lattice()?;
        let greedy = tok_spec.render(&greedy_decode(&lattice)?)?;
        let beam_ids = beam_decode(&lattice, spec.beam_width, spec.beam_alpha)?
            .into_iter()
            .next()
            .map(|h| h.labels)
            .unwrap_or_default();
        let beam = tok_spec.render(&beam_ids)?;
        Ok((greedy, beam))
    });
    let mut greedy_hyps = Vec::with_capacity(dev_ds.len());
    let mut beam_hyps = Vec::with_capacity(dev_ds.len());
    let mut refs = Vec::with_capacity(dev_ds.len());
    for (i, item) in decoded.into_iter().enumerate() {
        let (g, b) = item?;
        greedy_hyps.push(g);
        beam_hyps.push(b);
        refs.push(tok_spec.render(&dev_targets[i].ids)?);
    }
    let ref_strs: Vec<&str> = refs.iter().map(String::as_str).collect();
    let greedy_strs: Vec<&str> = greedy_hyps.iter().map(String::as_str).collect();
    let beam_strs: Vec<&str> = beam_hyps.iter().map(String::as_str).collect();
    Ok((
        score_corpus(&greedy_strs, &ref_strs)?,
        score_corpus(&beam_strs, &ref_strs)?,
    ))
}

/// Mean metrics over seeds for one (technique, tokenization, modality) cell,
/// or None when any seed failed.
fn cell_summary(
    results: &[RunResult],
    technique: Technique,
    tokenization: Tokenization,
    modality: Source,
) -> Option<(f64, f64)> {
    let rows: Vec<&RunResult> = results
        .iter()
        .filter(|r| {
            r.technique == technique && r.tokenization == tokenization && r.modality == modality
        })
        .collect();
    if rows.is_empty() || rows.iter().any(|r| r.metrics.is_none()) {
        return None;
    }
    let n = rows.len() as f64;
    let bleu = rows.iter().map(|r| r.metrics.as_ref().unwrap().bleu).sum::<f64>() / n;
    let rouge = rows
        .iter()
        .map(|r| r.metrics.as_ref().unwrap().rouge1_f)
        .sum::<f64>()
        / n;
    Some((bleu, rouge))
}

fn failed_note(
    results: &[RunResult],
    technique: Technique,
    tokenization: Tokenization,
    modality: Source,
) -> String {
    let mut kinds: Vec<&str> = Vec::new();
    for r in results.iter().filter(|r| {
        r.technique == technique
            && r.tokenization == tokenization
            && r.modality == modality
            && r.status == RunStatus::Failed
    }) {
        for f in &r.flags {
            let kind = f.split('@').next().unwrap_or(f);
            if !kinds.contains(&kind) {
                kinds.push(kind);
            }
        }
    }
    if kinds.is_empty() {
        "FAILED".to_string()
    } else {
        format!("FAILED [{}]", kinds.join(", "))
    }
}

/// Render the comparison table: scenario/technique rows, one (BLEU, ROUGE)
/// column per modality.
pub fn render_table(spec: &GridSpec, results: &[RunResult]) -> String {
    let mut out = String::new();
    let mods: Vec<Source> = spec.modalities.clone();
    out.push_str("| Scenario | Technique |");
    for m in &mods {
        out.push_str(&format!(" {} (BLEU, ROUGE) |", m.to_string().to_uppercase()));
    }
    out.push('\n');
    out.push_str("|---|---|");
    for _ in &mods {
        out.push_str("---|");
    }
    out.push('\n');

    // phoneme row first within each technique, matching the comparison layout
    let tok_order = [Tokenization::Phoneme, Tokenization::Character];
    for &technique in Technique::ALL.iter() {
        if !spec.techniques.contains(&technique) {
            continue;
        }
        for tokenization in tok_order {
            if !spec.tokenizations.contains(&tokenization) {
                continue;
            }
            out.push_str(&format!(
                "| {} | {}+{} |",
                technique.scenario(),
                technique.label(),
                tokenization.label()
            ));
            for &modality in &mods {
                match cell_summary(results, technique, tokenization, modality) {
                    Some((bleu, rouge)) => {
                        out.push_str(&format!(" ({bleu:.3}, {rouge:.3}) |"));
                    }
                    None => {
                        out.push_str(&format!(
                            " {} |",
                            failed_note(results, technique, tokenization, modality)
                        ));
                    }
                }
            }
            out.push('\n');
        }
    }
    if spec
        .modalities
        .iter()
        .any(|m| *m == Source::Ima && matches!(spec.ima.train, DataSource::Synth { .. }))
    {
        out.push_str(
            "\nIMA columns use a synthetic IMA-profile dataset (more channels, higher rate); \
             the original intracortical data is not redistributable.\n",
        );
    }
    out
}

const CSV_HEADER: &str = "technique,tokenization,modality,seed,bleu,rouge1_f,wer,cer,status,flags";

fn csv_metric(v: Option<f64>) -> String {
    match v {
        Some(v) => format!("{v:.6}"),
        None => String::new(),
    }
}

/// Per-seed rows plus one mean row per cell when several seeds ran.
pub fn render_csv(results: &[RunResult]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    let mut cells: Vec<(Technique, Tokenization, Source)> = Vec::new();
    for r in results {
        let key = (r.technique, r.tokenization, r.modality);
        if !cells.contains(&key) {
            cells.push(key);
        }
    }
    for (technique, tokenization, modality) in cells {
        let rows: Vec<&RunResult> = results
            .iter()
            .filter(|r| {
                r.technique == technique && r.tokenization == tokenization && r.modality == modality
            })
            .collect();
        for r in &rows {
            let m = r.metrics.as_ref();
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{}\n",
                r.technique,
                r.tokenization,
                r.modality,
                r.seed,
                csv_metric(m.map(|m| m.bleu)),
                csv_metric(m.map(|m| m.rouge1_f)),
                csv_metric(m.map(|m| m.wer)),
                csv_metric(m.map(|m| m.cer)),
                match r.status {
                    RunStatus::Completed => "ok",
                    RunStatus::Failed => "failed",
                },
                r.flags.join("|"),
            ));
        }
        if rows.len() > 1 {
            let ok: Vec<&&RunResult> = rows.iter().filter(|r| r.metrics.is_some()).collect();
            let mean = |f: fn(&MetricsReport) -> f64| -> Option<f64> {
                if ok.len() == rows.len() {
                    Some(ok.iter().map(|r| f(r.metrics.as_ref().unwrap())).sum::<f64>() / ok.len() as f64)
                } else {
                    None
                }
            };
            out.push_str(&format!(
                "{technique},{tokenization},{modality},mean,{},{},{},{},{},\n",
                csv_metric(mean(|m| m.bleu)),
                csv_metric(mean(|m| m.rouge1_f)),
                csv_metric(mean(|m| m.wer)),
                csv_metric(mean(|m| m.cer)),
                if ok.len() == rows.len() { "ok" } else { "failed" },
            ));
        }
    }
    out
}

/// Write results.csv, results.md, a JSON summary, and per-cell loss traces.
pub fn write_outputs(outcome: &GridOutcome, out_dir: &Path) -> Result<()> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let csv_path = out_dir.join("results.csv");
    fs::write(&csv_path, &outcome.csv).map_err(|e| Error::io(&csv_path, e))?;
    let md_path = out_dir.join("results.md");
    fs::write(&md_path, &outcome.table).map_err(|e| Error::io(&md_path, e))?;
    let json_path = out_dir.join("results.json");
    let json = serde_json::to_string_pretty(&outcome.results)
        .map_err(|e| Error::Format(format!("results serialization: {e}")))?;
    fs::write(&json_path, json).map_err(|e| Error::io(&json_path, e))?;

    let traces = out_dir.join("traces");
    fs::create_dir_all(&traces).map_err(|e| Error::io(&traces, e))?;
    for r in &outcome.results {
        let mut csv = String::from("step,loss,flag\n");
        let mut flag_at: std::collections::BTreeMap<usize, Vec<&str>> =
            std::collections::BTreeMap::new();
        for f in &r.flags {
            if let Some((kind, step)) = f.split_once('@') {
                if let Ok(step) = step.parse::<usize>() {
                    flag_at.entry(step).or_default().push(kind);
                }
            }
        }
        for (step, loss) in r.loss_trace.iter().enumerate() {
            let flags = flag_at
                .get(&step)
                .map(|k| k.join("|"))
                .unwrap_or_default();
            csv.push_str(&format!("{step},{loss:.6},{flags}\n"));
        }
        let path = traces.join(format!("{}.csv", r.cell_key()));
        fs::write(&path, csv).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::Family;
    use crate::pretrain::PretrainConfig;
    use crate::signals::{SynthConfig, TextSource};

    fn quick_spec() -> GridSpec {
        let text = TextSource::Random {
            words_min: 2,
            words_max: 2,
            word_len_min: 3,
            word_len_max: 4,
        };
        let eeg_cfg = SynthConfig {
            channels: 4,
            sample_rate_hz: 128.0,
            trials: 6,
            d_min: 6,
            d_max: 8,
            text: text.clone(),
            ..SynthConfig::default()
        };
        let ima_cfg = SynthConfig {
            channels: 6,
            sample_rate_hz: 256.0,
            trials: 6,
            d_min: 6,
            d_max: 8,
            text,
            source: Source::Ima,
            ..SynthConfig::default()
        };
        GridSpec {
            techniques: vec![Technique::Ctc],
            tokenizations: vec![Tokenization::Character],
            modalities: vec![Source::Eeg],
            seeds: vec![0],
            eeg: super::super::ModalityData {
                train: DataSource::Synth {
                    config: eeg_cfg.clone(),
                    seed: 1,
                },
                dev: DataSource::Synth {
                    config: SynthConfig {
                        trials: 3,
                        ..eeg_cfg
                    },
                    seed: 2,
                },
            },
            ima: super::super::ModalityData {
                train: DataSource::Synth {
                    config: ima_cfg.clone(),
                    seed: 3,
                },
                dev: DataSource::Synth {
                    config: SynthConfig {
                        trials: 3,
                        ..ima_cfg
                    },
                    seed: 4,
                },
            },
            encoder: EncoderConfig {
                family: Family::Conformer,
                blocks: 1,
                model_dim: 16,
                heads: 2,
                conv_kernel: 3,
                subsample_factor: 2,
                in_channels: 4,
                vocab_size: 29,
                dropout: 0.0,
            },
            train: TrainConfig {
                epochs: 1,
                batch_size: 4,
                ..TrainConfig::default()
            },
            pretrain: PretrainConfig {
                steps: 4,
                batch_size: 2,
                span_length: 3,
                mask_prob: 0.3,
                entries: 8,
                top_k: 1,
                ..PretrainConfig::default()
            },
            beam_width: 4,
            beam_alpha: None,
            lexicon: None,
            overrides: Vec::new(),
        }
    }

    #[test]
    fn single_cell_grid_populates_one_cell() {
        let spec = quick_spec();
        let outcome = run_grid(&spec).unwrap();
        assert_eq!(outcome.results.len(), 1);
        let r = &outcome.results[0];
        assert_eq!(r.status, RunStatus::Completed);
        assert!(r.metrics.is_some());
        assert!(outcome.table.contains("CTC+Character"));
        assert!(outcome.csv.starts_with(CSV_HEADER));
        assert_eq!(outcome.csv.lines().count(), 2);
    }

    #[test]
    fn grid_is_reproducible_byte_for_byte() {
        let spec = quick_spec();
        let a = run_grid(&spec).unwrap();
        let b = run_grid(&spec).unwrap();
        assert_eq!(a.csv, b.csv);
        assert_eq!(a.table, b.table);
    }

    #[test]
    fn failed_cell_renders_without_stopping_others() {
        let mut spec = quick_spec();
        spec.tokenizations = vec![Tokenization::Character, Tokenization::Phoneme];
        spec.overrides.push(super::super::CellOverride {
            technique: Technique::Ctc,
            tokenization: Tokenization::Character,
            modality: Source::Eeg,
            lr_multiplier: None,
            disable_clipping: false,
            lattice_fault: Some(0.5),
            epochs: None,
        });
        let outcome = run_grid(&spec).unwrap();
        assert_eq!(outcome.results.len(), 2);
        let failed: Vec<_> = outcome
            .results
            .iter()
            .filter(|r| r.status == RunStatus::Failed)
            .collect();
        assert_eq!(failed.len(), 1);
        assert_eq!(failed[0].tokenization, Tokenization::Character);
        assert!(failed[0].metrics.is_none());
        assert!(failed[0].flags.iter().any(|f| f.contains("NegativeCtcInput")));
        // the healthy phoneme cell still rendered
        assert!(outcome
            .results
            .iter()
            .any(|r| r.status == RunStatus::Completed && r.metrics.is_some()));
        assert!(outcome.table.contains("FAILED [NegativeCtcInput]"));
    }

    #[test]
    fn mean_row_appears_with_multiple_seeds() {
        let mut spec = quick_spec();
        spec.seeds = vec![0, 1];
        let outcome = run_grid(&spec).unwrap();
        assert_eq!(outcome.results.len(), 2);
        let mean_lines: Vec<&str> = outcome
            .csv
            .lines()
            .filter(|l| l.contains(",mean,"))
            .collect();
        assert_eq!(mean_lines.len(), 1);
    }

    #[test]
    fn outputs_land_on_disk() {
        let spec = quick_spec();
        let outcome = run_grid(&spec).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_outputs(&outcome, dir.path()).unwrap();
        assert!(dir.path().join("results.csv").exists());
        assert!(dir.path().join("results.md").exists());
        assert!(dir.path().join("results.json").exists());
        let trace = dir
            .path()
            .join("traces")
            .join(format!("{}.csv", outcome.results[0].cell_key()));
        let content = fs::read_to_string(trace).unwrap();
        assert!(content.starts_with("step,loss,flag\n"));
        assert!(content.lines().count() > 1);
    }
}
