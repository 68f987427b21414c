//! Acceptance suite: one test per criterion, each printing a PASS line.
//! Run with `cargo test --test acceptance -- --nocapture` to see the lines.

use std::time::Instant;

use c2t_core::ctc::{
    beam_decode, collapse, ctc_loss, ctc_loss_unvalidated, greedy_decode, validate_lattice,
    LogProbLattice,
};
use c2t_core::encoders::{EncoderConfig, Family};
use c2t_core::harness::{
    run_grid, CellOverride, GridSpec, Technique, Tokenization,
};
use c2t_core::metrics::{bleu, rouge, wer, EditUnit, Smoothing};
use c2t_core::numerics::{grad_check, log_softmax, registered_ops, Rng, Tensor};
use c2t_core::pretrain::{
    contrastive_loss, plan_masks, pretrain_run, Objective, PretrainConfig,
};
use c2t_core::signals::{generate_synthetic, Dataset, Source, Split, SynthConfig, TextSource};
use c2t_core::tokenizers::{TokenSequence, Vocabulary};
use c2t_core::trainer::{fit, FlagKind, RunStatus, TokenizationSpec, TrainConfig};
use c2t_core::Error;

// ── shared oracles ──────────────────────────────────────────────────

fn random_lattice(t: usize, v: usize, rng: &mut Rng) -> LogProbLattice {
    let logits: Vec<f64> = (0..t * v).map(|_| rng.normal() * 2.0).collect();
    LogProbLattice::from_logits(t, v, &logits).unwrap()
}

fn target(ids: Vec<usize>, v: usize) -> TokenSequence {
    TokenSequence::new(ids, Vocabulary::synthetic(v)).unwrap()
}

/// Enumerate all V^T paths; visit each with its joint log-probability.
fn for_each_path(lattice: &LogProbLattice, mut visit: impl FnMut(&[usize], f64)) {
    let t = lattice.timesteps();
    let v = lattice.vocab_size();
    let mut path = vec![0usize; t];
    loop {
        let lp: f64 = path.iter().enumerate().map(|(i, &k)| lattice.get(i, k)).sum();
        visit(&path, lp);
        let mut i = 0;
        loop {
            if i == t {
                return;
            }
            path[i] += 1;
            if path[i] < v {
                break;
            }
            path[i] = 0;
            i += 1;
        }
    }
}

fn brute_force_loss(lattice: &LogProbLattice, labels: &[usize]) -> Option<f64> {
    let mut total = 0.0f64;
    let mut any = false;
    for_each_path(lattice, |path, lp| {
        if collapse(path, 0) == labels {
            total += lp.exp();
            any = true;
        }
    });
    any.then(|| -total.ln())
}

fn feasible(labels: &[usize], t: usize) -> bool {
    let adjacent = labels.windows(2).filter(|w| w[0] == w[1]).count();
    t >= labels.len() + adjacent
}

// ── criterion 1 ─────────────────────────────────────────────────────

#[test]
fn acceptance_01_ctc_oracle_equivalence() {
    let start = Instant::now();
    let mut rng = Rng::seed(0xC1);
    let mut checked = 0;
    while checked < 500 {
        let t = 1 + rng.below(4); // 1..=4
        let v = 2 + rng.below(2); // 2..=3
        let len = 1 + rng.below(2); // 1..=2
        let labels: Vec<usize> = (0..len).map(|_| 1 + rng.below(v - 1)).collect();
        if !feasible(&labels, t) {
            continue;
        }
        let lattice = random_lattice(t, v, &mut rng);
        let got = ctc_loss(&lattice, &target(labels.clone(), v)).unwrap().loss;
        let oracle = brute_force_loss(&lattice, &labels).unwrap();
        assert!(
            (got - oracle).abs() < 1e-6,
            "t={t} v={v} labels={labels:?}: {got} vs {oracle}"
        );
        checked += 1;
    }
    let elapsed = start.elapsed();
    assert!(elapsed.as_secs() < 10, "took {elapsed:?}");
    println!(
        "ACCEPTANCE 1 (CTC oracle equivalence, 500 instances, {elapsed:?}): PASS"
    );
}

// ── criterion 2 ─────────────────────────────────────────────────────

#[test]
fn acceptance_02_ctc_gradient_and_occupancy() {
    let mut rng = Rng::seed(0xC2);
    let step = 1e-6;
    for case in 0..50 {
        let t = 2 + rng.below(4); // 2..=5
        let v = 2 + rng.below(2);
        let len = 1 + rng.below(2);
        let labels: Vec<usize> = (0..len).map(|_| 1 + rng.below(v - 1)).collect();
        if !feasible(&labels, t) {
            continue;
        }
        let lattice = random_lattice(t, v, &mut rng);
        let tgt = target(labels.clone(), v);
        let res = ctc_loss(&lattice, &tgt).unwrap();

        for row in 0..t {
            let gamma_sum: f64 = res.occupancy[row * v..(row + 1) * v].iter().sum();
            assert!((gamma_sum - 1.0).abs() < 1e-6, "case {case} row {row}: {gamma_sum}");
        }

        for idx in 0..t * v {
            let mut up = lattice.values().to_vec();
            up[idx] += step;
            let mut down = lattice.values().to_vec();
            down[idx] -= step;
            let lu = ctc_loss_unvalidated(&LogProbLattice::new(t, v, up).unwrap(), &tgt)
                .unwrap()
                .loss;
            let ld = ctc_loss_unvalidated(&LogProbLattice::new(t, v, down).unwrap(), &tgt)
                .unwrap()
                .loss;
            let fd = (lu - ld) / (2.0 * step);
            let rel = (res.grad[idx] - fd).abs() / fd.abs().max(1e-8);
            assert!(
                rel < 1e-4,
                "case {case} idx {idx}: analytic {} vs fd {fd}",
                res.grad[idx]
            );
        }
    }
    println!("ACCEPTANCE 2 (CTC gradient + occupancy, 50 instances): PASS");
}

// ── criterion 3 ─────────────────────────────────────────────────────

#[test]
fn acceptance_03_negative_loss_pathology() {
    // any positive entry is rejected before loss computation
    let mut rng = Rng::seed(0xC3);
    for _ in 0..100 {
        let t = 1 + rng.below(4);
        let v = 2 + rng.below(2);
        let lattice = random_lattice(t, v, &mut rng);
        let mut values = lattice.values().to_vec();
        let idx = rng.below(values.len());
        values[idx] = rng.uniform_in(1e-6, 0.5);
        let bad = LogProbLattice::new(t, v, values).unwrap();
        assert!(!validate_lattice(&bad).is_ok());
        match ctc_loss(&bad, &target(vec![1], v)) {
            Err(Error::InvalidLogProb { .. }) => {}
            other => panic!("expected InvalidLogProb, got {other:?}"),
        }
    }

    // loss is never negative on accepted input
    let mut min_loss = f64::INFINITY;
    for _ in 0..10_000 {
        let t = 1 + rng.below(6);
        let v = 2 + rng.below(3);
        let len = 1 + rng.below(2);
        let labels: Vec<usize> = (0..len).map(|_| 1 + rng.below(v - 1)).collect();
        if !feasible(&labels, t) {
            continue;
        }
        let lattice = random_lattice(t, v, &mut rng);
        let loss = ctc_loss(&lattice, &target(labels, v)).unwrap().loss;
        min_loss = min_loss.min(loss);
        assert!(loss >= 0.0, "negative loss {loss}");
    }
    assert!(min_loss >= 0.0);
    println!("ACCEPTANCE 3 (negative-loss pathology rejected; min observed loss {min_loss:.6} >= 0): PASS");
}

// ── criterion 4 ─────────────────────────────────────────────────────

#[test]
fn acceptance_04_numerics_gradchecks_and_log_softmax() {
    let core_ops = [
        "matmul",
        "conv1d",
        "depthwise_conv1d",
        "layernorm",
        "attention",
        "glu",
        "swish",
        "log_softmax",
    ];
    let mut rng = Rng::seed(0xC4);
    for op in registered_ops() {
        let points = if core_ops.contains(&op) { 10 } else { 3 };
        for p in 0..points {
            let point: Vec<f64> = (0..24).map(|_| rng.normal()).collect();
            let err = grad_check(op, &point, 1e-5).unwrap();
            assert!(err < 1e-4, "{op} point {p}: fd error {err}");
        }
    }

    // log softmax at extreme magnitudes
    for seed in 0..50u64 {
        let mut r = Rng::seed(seed);
        let logits: Vec<f64> = (0..29).map(|_| r.uniform_in(-1e4, 1e4)).collect();
        let out = log_softmax(&logits).unwrap();
        assert!(out.iter().all(|v| v.is_finite() && *v <= 0.0));
        let sum: f64 = out.iter().map(|v| v.exp()).sum();
        assert!((sum - 1.0).abs() < 1e-9, "seed {seed}: {sum}");
    }
    println!("ACCEPTANCE 4 (primitive gradchecks < 1e-4; log_softmax stable to |1e4|): PASS");
}

// ── criterion 5 ─────────────────────────────────────────────────────

#[test]
fn acceptance_05_decoder_correctness() {
    let mut rng = Rng::seed(0xC5);

    // greedy equals brute-force best path
    for _ in 0..100 {
        let t = 1 + rng.below(4);
        let v = 2 + rng.below(2);
        let lattice = random_lattice(t, v, &mut rng);
        let mut best_lp = f64::NEG_INFINITY;
        let mut best = Vec::new();
        for_each_path(&lattice, |path, lp| {
            if lp > best_lp {
                best_lp = lp;
                best = path.to_vec();
            }
        });
        assert_eq!(greedy_decode(&lattice).unwrap(), collapse(&best, 0));
    }

    // exhaustive-width beam equals the exact marginal argmax
    for case in 0..200 {
        let t = 1 + rng.below(3); // 1..=3
        let v = 2 + rng.below(2); // 2..=3
        let lattice = random_lattice(t, v, &mut rng);
        let mut mass: std::collections::HashMap<Vec<usize>, f64> = std::collections::HashMap::new();
        for_each_path(&lattice, |path, lp| {
            *mass.entry(collapse(path, 0)).or_insert(0.0) += lp.exp();
        });
        let exact = mass
            .into_iter()
            .max_by(|a, b| a.1.total_cmp(&b.1))
            .unwrap();
        let beam = beam_decode(&lattice, 10_000, None).unwrap();
        assert_eq!(beam[0].labels, exact.0, "case {case} t={t} v={v}");
    }
    println!("ACCEPTANCE 5 (greedy = best path; exhaustive beam = marginal argmax, 200 instances): PASS");
}

// ── criterion 6 ─────────────────────────────────────────────────────

#[test]
fn acceptance_06_metrics_fixtures() {
    let b = bleu(&["the cat"], &["the cat sat"], 1, Smoothing::None).unwrap();
    assert!((b - 0.6065).abs() < 1e-4, "BLEU-1 {b}");

    let (r1, _, _) = rouge("the cat", "the cat sat").unwrap();
    assert!((r1 - 0.8).abs() < 1e-6, "ROUGE-1 {r1}");

    let w = wer("the cat", "the cat sat", EditUnit::Word).unwrap();
    assert!((w - 0.3333).abs() < 1e-4 && (w - 1.0 / 3.0).abs() < 1e-6, "WER {w}");

    // identity cases exact
    for text in ["hello world", "a b c d"] {
        assert_eq!(bleu(&[text], &[text], 4, Smoothing::Epsilon).unwrap(), 1.0);
        assert_eq!(rouge(text, text).unwrap(), (1.0, 1.0, 1.0));
        assert_eq!(wer(text, text, EditUnit::Word).unwrap(), 0.0);
        assert_eq!(wer(text, text, EditUnit::Char).unwrap(), 0.0);
    }
    println!("ACCEPTANCE 6 (metric fixtures: BLEU-1 0.6065, ROUGE-1 0.8, WER 1/3, identities): PASS");
}

// ── criterion 7 ─────────────────────────────────────────────────────

fn learnability_data(seed: u64) -> (Dataset, Dataset) {
    let synth = SynthConfig {
        channels: 8,
        sample_rate_hz: 256.0,
        snr: 100.0,
        d_min: 8,
        d_max: 16,
        trials: 900,
        text: TextSource::Random {
            words_min: 3,
            words_max: 5,
            word_len_min: 3,
            word_len_max: 6,
        },
        amplitude: 1.0,
        source: Source::Eeg,
        template_seed: 40 + seed,
    };
    let train = generate_synthetic(&synth, 1000 + seed, Split::Train).unwrap();
    let dev = generate_synthetic(
        &SynthConfig {
            trials: 100,
            ..synth
        },
        2000 + seed,
        Split::Dev,
    )
    .unwrap();
    (train, dev)
}

#[test]
fn acceptance_07_learnability() {
    let encoder = EncoderConfig {
        family: Family::Conformer,
        blocks: 2,
        model_dim: 64,
        heads: 4,
        conv_kernel: 15,
        subsample_factor: 4,
        in_channels: 8,
        vocab_size: 29,
        dropout: 0.1,
    };
    for seed in 0..3u64 {
        let start = Instant::now();
        let (train_ds, dev_ds) = learnability_data(seed);
        let config = TrainConfig {
            learning_rate: 3e-3,
            batch_size: 16,
            epochs: 4,
            seed,
            dropout: false,
            zscore: false,
            ..TrainConfig::default()
        };
        let report = fit(
            &train_ds,
            &dev_ds,
            &encoder,
            &config,
            &TokenizationSpec::Character,
            None,
        )
        .unwrap();
        assert_eq!(report.status, RunStatus::Completed, "seed {seed}");
        let elapsed = start.elapsed();
        assert!(
            elapsed.as_secs() < 15 * 60,
            "seed {seed}: training took {elapsed:?}"
        );

        let best_cer = report
            .epochs
            .iter()
            .map(|e| e.dev_cer)
            .fold(f64::INFINITY, f64::min);
        assert!(best_cer < 0.2, "seed {seed}: dev CER {best_cer}");

        // greedy BLEU on the dev split with the returned (best) parameters
        let mut hyps = Vec::new();
        let mut refs = Vec::new();
        for trial in &dev_ds.trials {
            let fwd = c2t_core::encoders::forward(
                &encoder,
                &report.params.values,
                &trial.recording,
                c2t_core::encoders::ForwardOpts {
                    zscore: false,
                    ..Default::default()
                },
            )
            .unwrap();
            let ids = greedy_decode(&fwd.lattice().unwrap()).unwrap();
            hyps.push(c2t_core::tokenizers::decode_chars(&ids).unwrap());
            refs.push(c2t_core::tokenizers::normalize(&trial.text).unwrap());
        }
        let h: Vec<&str> = hyps.iter().map(String::as_str).collect();
        let r: Vec<&str> = refs.iter().map(String::as_str).collect();
        let greedy_bleu = bleu(&h, &r, 4, Smoothing::Epsilon).unwrap();
        assert!(greedy_bleu > 0.5, "seed {seed}: greedy BLEU {greedy_bleu}");
        println!(
            "  seed {seed}: dev CER {best_cer:.4}, greedy BLEU {greedy_bleu:.4}, {elapsed:?}"
        );
    }
    println!("ACCEPTANCE 7 (learnability: CER < 0.2 and BLEU > 0.5, 3 seeds): PASS");
}

// ── criterion 8 ─────────────────────────────────────────────────────

#[test]
fn acceptance_08_failure_mode_reproduction() {
    // two-cell grid: one healthy, one with clipping disabled and lr x100
    let text = TextSource::Random {
        words_min: 2,
        words_max: 3,
        word_len_min: 3,
        word_len_max: 5,
    };
    let synth = SynthConfig {
        channels: 4,
        sample_rate_hz: 128.0,
        trials: 48,
        d_min: 8,
        d_max: 12,
        text,
        source: Source::Eeg,
        ..SynthConfig::default()
    };
    let mut spec = GridSpec {
        techniques: vec![Technique::Ctc],
        tokenizations: vec![Tokenization::Character, Tokenization::Phoneme],
        modalities: vec![Source::Eeg],
        seeds: vec![0],
        encoder: EncoderConfig {
            family: Family::Conformer,
            blocks: 1,
            model_dim: 32,
            heads: 4,
            conv_kernel: 7,
            subsample_factor: 4,
            in_channels: 4,
            vocab_size: 29,
            dropout: 0.0,
        },
        train: TrainConfig {
            learning_rate: 1e-2,
            warmup_frac: 0.0,
            batch_size: 8,
            epochs: 20, // cap well under 200 steps
            zscore: false,
            dropout: false,
            ..TrainConfig::default()
        },
        ..GridSpec::default()
    };
    spec.eeg = c2t_core::harness::ModalityData {
        train: c2t_core::harness::DataSource::Synth {
            config: synth.clone(),
            seed: 1,
        },
        dev: c2t_core::harness::DataSource::Synth {
            config: SynthConfig { trials: 8, ..synth },
            seed: 2,
        },
    };
    spec.overrides.push(CellOverride {
        technique: Technique::Ctc,
        tokenization: Tokenization::Character,
        modality: Source::Eeg,
        lr_multiplier: Some(100.0),
        disable_clipping: true,
        lattice_fault: None,
        epochs: None,
    });

    let outcome = run_grid(&spec).unwrap();
    assert_eq!(outcome.results.len(), 2);

    let exploded = outcome
        .results
        .iter()
        .find(|r| r.tokenization == Tokenization::Character)
        .unwrap();
    assert_eq!(exploded.status, RunStatus::Failed);
    assert!(exploded.metrics.is_none());
    let watchdog_flag = exploded.flags.iter().find(|f| {
        f.starts_with(&FlagKind::LossHighHard.to_string())
            || f.starts_with(&FlagKind::NonFiniteLoss.to_string())
    });
    let flag = watchdog_flag.expect("hard watchdog flag present");
    let step: usize = flag.split('@').nth(1).unwrap().parse().unwrap();
    assert!(step <= 200, "flag raised at step {step}");

    let healthy = outcome
        .results
        .iter()
        .find(|r| r.tokenization == Tokenization::Phoneme)
        .unwrap();
    assert_eq!(healthy.status, RunStatus::Completed);
    assert!(healthy.metrics.is_some());
    assert!(outcome.table.contains("FAILED"));
    println!(
        "ACCEPTANCE 8 (explosion flagged {} at step {step}; grid rendered remaining cells): PASS",
        flag.split('@').next().unwrap()
    );
}

// ── criterion 9 ─────────────────────────────────────────────────────

fn pretrain_dataset(seed: u64) -> Dataset {
    let cfg = SynthConfig {
        channels: 4,
        sample_rate_hz: 128.0,
        snr: 50.0,
        trials: 24,
        d_min: 8,
        d_max: 12,
        text: TextSource::Random {
            words_min: 3,
            words_max: 4,
            word_len_min: 3,
            word_len_max: 5,
        },
        source: Source::Eeg,
        template_seed: 60,
        ..SynthConfig::default()
    };
    generate_synthetic(&cfg, seed, Split::Train).unwrap()
}

fn pretrain_encoder() -> EncoderConfig {
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

#[test]
fn acceptance_09_pretraining_properties() {
    // closed-form contrastive fixture: identical context/target rows with
    // mutually orthogonal distractors, kappa = 0.1, K = 10
    let m = 11;
    let f = 16;
    let mut data = vec![0.0; m * f];
    for i in 0..m {
        data[i * f + i] = 1.0;
    }
    let rows = Tensor::new(vec![m, f], data).unwrap();
    let mask = plan_masks(m, 1.0, m, 0).unwrap();
    let loss = contrastive_loss(&rows, &rows, &mask, 10, 0.1, 3).unwrap();
    let expect = (1.0f64 + 10.0 * (-10.0f64).exp()).ln();
    assert!((loss - expect).abs() < 1e-6, "{loss} vs {expect}");

    // teacher equals offline EMA recomputation at every step of a 100-step run
    let ds = pretrain_dataset(1);
    let config = PretrainConfig {
        steps: 100,
        batch_size: 2,
        mask_prob: 0.2,
        span_length: 4,
        distractors: 5,
        entries: 8,
        top_k: 1,
        record_trajectory: true,
        ..PretrainConfig::default()
    };
    let out = pretrain_run(&ds, &pretrain_encoder(), Objective::Data2Vec, &config, 11).unwrap();
    assert_eq!(out.trajectory.len(), 100);
    let mut shadow: Option<c2t_core::numerics::ParamSet> = None;
    for (step, (student, teacher)) in out.trajectory.iter().enumerate() {
        let tau = config.tau_start
            + (config.tau_end - config.tau_start) * step as f64 / (config.steps - 1) as f64;
        let prev = shadow.take().unwrap_or_else(|| {
            // recover the initial teacher from the first recorded pair
            let mut init = teacher.clone();
            for (name, t) in init.iter_mut() {
                let s = student.get(name).unwrap();
                for (tv, &sv) in t.data_mut().iter_mut().zip(s.data()) {
                    *tv = (*tv - (1.0 - tau) * sv) / tau;
                }
            }
            init
        });
        let mut recomputed = prev;
        for (name, t) in recomputed.iter_mut() {
            let s = student.get(name).unwrap();
            for (tv, &sv) in t.data_mut().iter_mut().zip(s.data()) {
                *tv = tau * *tv + (1.0 - tau) * sv;
            }
        }
        for (name, t) in teacher.iter() {
            let r = recomputed.get(name).unwrap();
            for (a, b) in t.data().iter().zip(r.data()) {
                assert!((a - b).abs() < 1e-6, "step {step}, {name}");
            }
        }
        shadow = Some(recomputed);
    }

    // both objectives decrease over 200 steps for 3 seeds
    for objective in [Objective::Wav2Vec2, Objective::Data2Vec] {
        for seed in 0..3u64 {
            let ds = pretrain_dataset(100 + seed);
            let config = PretrainConfig {
                steps: 200,
                batch_size: 2,
                mask_prob: 0.2,
                span_length: 4,
                distractors: 5,
                entries: 8,
                top_k: 1,
                ..PretrainConfig::default()
            };
            let out =
                pretrain_run(&ds, &pretrain_encoder(), objective, &config, 30 + seed).unwrap();
            let first: f64 = out.loss_trace[..20].iter().sum::<f64>() / 20.0;
            let last: f64 = out.loss_trace[180..].iter().sum::<f64>() / 20.0;
            assert!(
                last < first,
                "{objective} seed {seed}: first {first:.4}, last {last:.4}"
            );
        }
    }
    println!("ACCEPTANCE 9 (contrastive fixture, offline EMA equality, loss decrease x3 seeds): PASS");
}

// ── criterion 10 ────────────────────────────────────────────────────

#[test]
fn acceptance_10_grid_shape_and_reproducibility() {
    let spec = GridSpec::default();
    let outcome = run_grid(&spec).unwrap();

    // 5 techniques x 2 tokenizations x 2 modalities
    assert_eq!(outcome.results.len(), 20);
    let table_rows: Vec<&str> = outcome
        .table
        .lines()
        .filter(|l| l.starts_with('|') && !l.starts_with("|---") && !l.contains("Scenario"))
        .collect();
    assert_eq!(table_rows.len(), 10, "table:\n{}", outcome.table);
    for row in &table_rows {
        // one scenario, one technique+tokenization, two modality columns
        assert_eq!(row.matches('|').count(), 5, "{row}");
    }
    for label in ["CTC+", "Data2Vec+", "Wav2Vec2+", "Bendr+", "EEG-Conformer+"] {
        assert_eq!(
            table_rows.iter().filter(|r| r.contains(label)).count(),
            2,
            "{label}"
        );
    }

    // byte-for-byte reproducible results.csv
    let again = run_grid(&spec).unwrap();
    assert_eq!(outcome.csv, again.csv);
    assert_eq!(outcome.csv.lines().count(), 21); // header + 20 rows, single seed
    println!("ACCEPTANCE 10 (default grid: 5x2x2 layout, byte-reproducible csv): PASS");
}
