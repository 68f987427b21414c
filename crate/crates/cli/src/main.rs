//! `c2t`: generate/validate datasets, pretrain/train/decode models, score
//! hypotheses, run the comparison grid, and inspect checkpoints.
//!
//! Exit codes: 0 success, 1 usage error, 2 run failure.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};

use c2t_core::harness::{
    decode_job, pretrain_job, run_grid, train_job, write_outputs, DecodeJob, GridSpec,
    PretrainJob, TrainJob,
};
use c2t_core::metrics::score_corpus;
use c2t_core::numerics::{inspect_checkpoint, save_checkpoint};
use c2t_core::signals::{generate_synthetic, load_dataset, save_dataset, validate_dataset, Split,
    SynthConfig};
use c2t_core::tokenizers::normalize;
use c2t_core::trainer::RunStatus;
use c2t_core::Error;

#[derive(Parser)]
#[command(name = "c2t", version, about = "Desk-scale brain-signal-to-text decoding toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset onto disk.
    Generate {
        /// Synthesis config (JSON).
        #[arg(long)]
        config: PathBuf,
        /// Output directory for manifest.jsonl and signal payloads.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Split label written into the dataset: train, dev, or test.
        #[arg(long, default_value = "train")]
        split: String,
    },
    /// Load a manifest and report per-trial health.
    Validate {
        manifest: PathBuf,
    },
    /// Self-supervised pretraining; writes a checkpoint and a loss trace.
    Pretrain {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Supervised CTC training; writes the best checkpoint, trace, and eval.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Decode a dataset with a trained checkpoint.
    Decode {
        #[arg(long)]
        config: PathBuf,
        /// Hypotheses file (one sentence per line); stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score a hypothesis file against a reference file.
    Score {
        hypotheses: PathBuf,
        references: PathBuf,
        /// Write the JSON report here as well as stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the technique x tokenization x modality grid.
    Grid {
        /// Grid spec (JSON); the built-in default grid when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "grid-out")]
        out_dir: PathBuf,
        /// Replace the grid config's seed list with this single seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Concurrency degree for independent cells (default: all cores).
        #[arg(long)]
        threads: Option<usize>,
    },
    /// List the tensors stored in a checkpoint.
    InspectCheckpoint {
        path: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, Error> {
    let text = fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    serde_json::from_str(&text)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

fn write_text(path: &Path, content: &str) -> Result<(), Error> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::Io {
            path: parent.to_path_buf(),
            source: e,
        })?;
    }
    fs::write(path, content).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn trace_csv(trace: &[f64]) -> String {
    let mut out = String::from("step,loss,flag\n");
    for (step, loss) in trace.iter().enumerate() {
        out.push_str(&format!("{step},{loss:.6},\n"));
    }
    out
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Generate {
            config,
            out,
            seed,
            split,
        } => {
            let cfg: SynthConfig = read_json(&config)?;
            let split = parse_split(&split)?;
            let dataset = generate_synthetic(&cfg, seed, split)?;
            let manifest = save_dataset(&dataset, &out)?;
            println!(
                "wrote {} trials to {}",
                dataset.len(),
                manifest.display()
            );
            Ok(())
        }
        Command::Validate { manifest } => {
            let dataset = load_dataset(&manifest, Split::Train)?;
            let report = validate_dataset(&dataset);
            println!(
                "{}",
                serde_json::to_string_pretty(&report)
                    .map_err(|e| Error::Format(e.to_string()))?
            );
            Ok(())
        }
        Command::Pretrain {
            config,
            out_dir,
            seed,
        } => {
            let job: PretrainJob = read_json(&config)?;
            let outcome = pretrain_job(&job, seed.unwrap_or(0))?;
            fs::create_dir_all(&out_dir).map_err(|e| Error::Io {
                path: out_dir.clone(),
                source: e,
            })?;
            let ckpt = out_dir.join("pretrained.ckpt");
            save_checkpoint(&ckpt, &outcome.params.values)?;
            write_text(&out_dir.join("pretrain_trace.csv"), &trace_csv(&outcome.loss_trace))?;
            let first = outcome.loss_trace.first().copied().unwrap_or(f64::NAN);
            let last = outcome.loss_trace.last().copied().unwrap_or(f64::NAN);
            println!(
                "pretrained {} steps ({first:.4} -> {last:.4}); checkpoint at {}",
                outcome.loss_trace.len(),
                ckpt.display()
            );
            Ok(())
        }
        Command::Train {
            config,
            out_dir,
            seed,
        } => {
            let job: TrainJob = read_json(&config)?;
            let report = train_job(&job, seed)?;
            fs::create_dir_all(&out_dir).map_err(|e| Error::Io {
                path: out_dir.clone(),
                source: e,
            })?;
            let ckpt = out_dir.join("model.ckpt");
            save_checkpoint(&ckpt, &report.params.values)?;
            write_text(&out_dir.join("train_trace.csv"), &fit_trace_csv(&report))?;
            let eval = serde_json::json!({
                "status": report.status,
                "epochs": report.epochs,
                "flags": report.flags,
                "steps_run": report.steps_run,
                "infeasible_trials": report.infeasible_trials,
            });
            write_text(
                &out_dir.join("eval.json"),
                &serde_json::to_string_pretty(&eval).map_err(|e| Error::Format(e.to_string()))?,
            )?;
            match report.status {
                RunStatus::Completed => {
                    let last = report.epochs.last();
                    println!(
                        "training complete: dev CER {:.4}, checkpoint at {}",
                        last.map(|e| e.dev_cer).unwrap_or(f64::NAN),
                        ckpt.display()
                    );
                    Ok(())
                }
                RunStatus::Failed => Err(Error::State(format!(
                    "training FAILED with flags: {}",
                    report
                        .flags
                        .iter()
                        .map(|f| format!("{}@{}", f.kind, f.step))
                        .collect::<Vec<_>>()
                        .join(", ")
                ))),
            }
        }
        Command::Decode { config, out } => {
            let job: DecodeJob = read_json(&config)?;
            let output = decode_job(&job)?;
            let text = output.hypotheses.join("\n") + "\n";
            match out {
                Some(path) => write_text(&path, &text)?,
                None => print!("{text}"),
            }
            println!(
                "{}",
                serde_json::to_string_pretty(&output.metrics)
                    .map_err(|e| Error::Format(e.to_string()))?
            );
            Ok(())
        }
        Command::Score {
            hypotheses,
            references,
            out,
        } => {
            let hyp_text = fs::read_to_string(&hypotheses).map_err(|e| Error::Io {
                path: hypotheses.clone(),
                source: e,
            })?;
            let ref_text = fs::read_to_string(&references).map_err(|e| Error::Io {
                path: references.clone(),
                source: e,
            })?;
            let hyps: Vec<String> = hyp_text
                .lines()
                .map(|l| normalize(l).unwrap_or_default())
                .collect();
            let refs: Vec<String> = ref_text
                .lines()
                .map(|l| normalize(l).map_err(|_| Error::InvalidInput("empty reference line".into())))
                .collect::<Result<_, _>>()?;
            if hyps.len() != refs.len() {
                return Err(Error::InvalidInput(format!(
                    "{} hypothesis lines vs {} reference lines",
                    hyps.len(),
                    refs.len()
                )));
            }
            let h: Vec<&str> = hyps.iter().map(String::as_str).collect();
            let r: Vec<&str> = refs.iter().map(String::as_str).collect();
            let report = score_corpus(&h, &r)?;
            let json = serde_json::to_string_pretty(&report)
                .map_err(|e| Error::Format(e.to_string()))?;
            if let Some(path) = out {
                write_text(&path, &json)?;
            }
            println!("{json}");
            Ok(())
        }
        Command::Grid {
            config,
            out_dir,
            seed,
            threads,
        } => {
            let mut spec: GridSpec = match config {
                Some(path) => read_json(&path)?,
                None => GridSpec::default(),
            };
            if let Some(seed) = seed {
                spec.seeds = vec![seed];
            }
            if let Some(threads) = threads {
                c2t_core::numerics::kernels::set_parallelism(threads)?;
            }
            let outcome = run_grid(&spec)?;
            write_outputs(&outcome, &out_dir)?;
            print!("{}", outcome.table);
            println!(
                "\n{} cells -> {}",
                outcome.results.len(),
                out_dir.join("results.csv").display()
            );
            Ok(())
        }
        Command::InspectCheckpoint { path } => {
            let entries = inspect_checkpoint(&path)?;
            let mut total = 0usize;
            for e in &entries {
                let numel: usize = e.shape.iter().product();
                total += numel;
                println!("{}  {:?}  {}", e.name, e.shape, numel);
            }
            println!("{} tensors, {} values", entries.len(), total);
            Ok(())
        }
    }
}

fn fit_trace_csv(report: &c2t_core::trainer::FitReport) -> String {
    let mut flag_at: std::collections::BTreeMap<usize, Vec<String>> =
        std::collections::BTreeMap::new();
    for f in &report.flags {
        flag_at.entry(f.step).or_default().push(f.kind.to_string());
    }
    let mut out = String::from("step,loss,flag\n");
    for (step, loss) in report.loss_trace.iter().enumerate() {
        let flags = flag_at.get(&step).map(|k| k.join("|")).unwrap_or_default();
        out.push_str(&format!("{step},{loss:.6},{flags}\n"));
    }
    out
}

fn parse_split(s: &str) -> Result<Split, Error> {
    match s {
        "train" => Ok(Split::Train),
        "dev" => Ok(Split::Dev),
        "test" => Ok(Split::Test),
        other => Err(Error::InvalidInput(format!(
            "split must be train, dev, or test; got {other:?}"
        ))),
    }
}
