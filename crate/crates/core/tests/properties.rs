//! Property tests for the library's contract-level invariants.

use proptest::prelude::*;

use c2t_core::ctc::{beam_decode, collapse, ctc_loss, validate_lattice, LogProbLattice};
use c2t_core::metrics::{bleu, rouge, wer, EditUnit, Smoothing};
use c2t_core::signals::{generate_synthetic, slice_trial, Split, SynthConfig, TextSource};
use c2t_core::tokenizers::{decode_chars, encode_chars, normalize, TokenSequence, Vocabulary};

/// One normalized word: lowercase letters with an optional apostrophe.
fn word() -> impl Strategy<Value = String> {
    "[a-z]{1,8}(?:'[a-z]{1,3})?"
}

fn normalized_text() -> impl Strategy<Value = String> {
    prop::collection::vec(word(), 1..6).prop_map(|words| words.join(" "))
}

fn logits(t: usize, v: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-5.0..5.0f64, t * v)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn character_round_trip(text in normalized_text()) {
        let seq = encode_chars(&text).unwrap();
        prop_assert_eq!(decode_chars(&seq.ids).unwrap(), text);
        prop_assert!(!seq.contains_blank());
    }

    #[test]
    fn normalize_is_idempotent(raw in ".{0,40}") {
        if let Ok(once) = normalize(&raw) {
            prop_assert_eq!(normalize(&once).unwrap(), once);
        }
    }

    #[test]
    fn collapse_output_is_blank_free_and_stretch_invariant(
        path in prop::collection::vec(0usize..4, 0..24)
    ) {
        let once = collapse(&path, 0);
        prop_assert!(!once.contains(&0));
        let stretched: Vec<usize> = path.iter().flat_map(|&id| [id, id, id]).collect();
        prop_assert_eq!(collapse(&stretched, 0), once);
    }

    #[test]
    fn log_softmax_lattices_always_validate(values in logits(5, 4)) {
        let lattice = LogProbLattice::from_logits(5, 4, &values).unwrap();
        prop_assert!(validate_lattice(&lattice).is_ok());
    }

    #[test]
    fn ctc_loss_non_negative_with_stochastic_occupancy(
        values in logits(4, 3),
        label in 1usize..3,
    ) {
        let lattice = LogProbLattice::from_logits(4, 3, &values).unwrap();
        let target = TokenSequence::new(vec![label], Vocabulary::synthetic(3)).unwrap();
        let res = ctc_loss(&lattice, &target).unwrap();
        prop_assert!(res.loss >= 0.0);
        for t in 0..4 {
            let row: f64 = res.occupancy[t * 3..(t + 1) * 3].iter().sum();
            prop_assert!((row - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn beam_scores_weakly_decrease(values in logits(5, 3), width in 1usize..12) {
        let lattice = LogProbLattice::from_logits(5, 3, &values).unwrap();
        let beam = beam_decode(&lattice, width, None).unwrap();
        prop_assert!(!beam.is_empty());
        for pair in beam.windows(2) {
            prop_assert!(pair[0].score >= pair[1].score);
        }
    }

    #[test]
    fn metric_identities(text in normalized_text()) {
        let refs = [text.as_str()];
        prop_assert_eq!(bleu(&refs, &refs, 4, Smoothing::Epsilon).unwrap(), 1.0);
        prop_assert_eq!(rouge(&text, &text).unwrap(), (1.0, 1.0, 1.0));
        prop_assert_eq!(wer(&text, &text, EditUnit::Word).unwrap(), 0.0);
        prop_assert_eq!(wer(&text, &text, EditUnit::Char).unwrap(), 0.0);
    }

    #[test]
    fn adjacent_slices_rebuild_synthetic_trials(seed in 0u64..500, cut in 0.1f64..0.9) {
        let cfg = SynthConfig {
            channels: 2,
            sample_rate_hz: 128.0,
            trials: 1,
            d_min: 4,
            d_max: 8,
            text: TextSource::Sentences(vec!["abc de".into()]),
            ..SynthConfig::default()
        };
        let ds = generate_synthetic(&cfg, seed, Split::Train).unwrap();
        let trial = &ds.trials[0];
        let duration = trial.recording.duration_ms();
        let mid = duration * cut;
        let a = slice_trial(trial, 0.0, mid).unwrap();
        let b = slice_trial(trial, mid, duration).unwrap();
        for c in 0..2 {
            let mut joined = a.channel(c).to_vec();
            joined.extend_from_slice(b.channel(c));
            prop_assert_eq!(joined.as_slice(), trial.recording.channel(c));
        }
    }
}
