//! Collapse map, greedy best-path decoding, and prefix beam search.

use std::collections::HashMap;

use crate::numerics::kernels::logsumexp;
use crate::Result;

use super::{validate_lattice, LogProbLattice};

/// Merge adjacent repeats, then delete blanks.
pub fn collapse(path: &[usize], blank: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev: Option<usize> = None;
    for &id in path {
        if prev != Some(id) {
            if id != blank {
                out.push(id);
            }
            prev = Some(id);
        }
    }
    out
}

/// Per-row argmax (ties -> lowest id), then collapse. Blank is id 0.
pub fn greedy_decode(lattice: &LogProbLattice) -> Result<Vec<usize>> {
    validate_lattice(lattice).into_result()?;
    let path: Vec<usize> = (0..lattice.timesteps())
        .map(|t| crate::numerics::argmax_row(lattice.row(t)))
        .collect();
    Ok(collapse(&path, 0))
}

/// One beam-search hypothesis: a blank-free label sequence and its score.
#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    pub labels: Vec<usize>,
    /// log of the marginal probability mass of all paths collapsing to
    /// `labels`, plus `alpha * labels.len()` when a length bonus is set.
    pub score: f64,
}

#[derive(Clone, Copy)]
struct PrefixProb {
    /// log p(prefix, last path symbol blank)
    blank: f64,
    /// log p(prefix, last path symbol = last label)
    non_blank: f64,
}

impl PrefixProb {
    const EMPTY: PrefixProb = PrefixProb {
        blank: f64::NEG_INFINITY,
        non_blank: f64::NEG_INFINITY,
    };

    fn total(&self) -> f64 {
        logsumexp(&[self.blank, self.non_blank])
    }
}

/// Prefix beam search marginalizing blank/non-blank mass per prefix.
///
/// Returns up to `beam_width` hypotheses sorted by descending score. With a
/// beam at least as large as the number of reachable prefixes the top
/// hypothesis is the exact marginal-probability argmax. `beam_width == 1`
/// degenerates to a path-greedy variant that tracks a single prefix.
pub fn beam_decode(
    lattice: &LogProbLattice,
    beam_width: usize,
    alpha: Option<f64>,
) -> Result<Vec<Hypothesis>> {
    if beam_width == 0 {
        return Err(crate::Error::InvalidInput("beam_width must be >= 1".into()));
    }
    validate_lattice(lattice).into_result()?;
    let v = lattice.vocab_size();
    let bonus = alpha.unwrap_or(0.0);

    let mut beams: Vec<(Vec<usize>, PrefixProb)> = vec![(
        Vec::new(),
        PrefixProb {
            blank: 0.0,
            non_blank: f64::NEG_INFINITY,
        },
    )];

    for t in 0..lattice.timesteps() {
        let row = lattice.row(t);
        let mut next: HashMap<Vec<usize>, PrefixProb> = HashMap::with_capacity(beams.len() * v);
        for (prefix, prob) in &beams {
            let total = prob.total();
            // stay on the same prefix via a blank emission
            {
                let slot = next.entry(prefix.clone()).or_insert(PrefixProb::EMPTY);
                slot.blank = logsumexp(&[slot.blank, total + row[0]]);
            }
            for (label, &lp) in row.iter().enumerate().skip(1) {
                if Some(&label) == prefix.last() {
                    // repeat without blank merges into the same prefix
                    {
                        let slot = next.entry(prefix.clone()).or_insert(PrefixProb::EMPTY);
                        slot.non_blank = logsumexp(&[slot.non_blank, prob.non_blank + lp]);
                    }
                    // a blank-separated repeat extends the prefix
                    let mut extended = prefix.clone();
                    extended.push(label);
                    let slot = next.entry(extended).or_insert(PrefixProb::EMPTY);
                    slot.non_blank = logsumexp(&[slot.non_blank, prob.blank + lp]);
                } else {
                    let mut extended = prefix.clone();
                    extended.push(label);
                    let slot = next.entry(extended).or_insert(PrefixProb::EMPTY);
                    slot.non_blank = logsumexp(&[slot.non_blank, total + lp]);
                }
            }
        }
        let mut ranked: Vec<(Vec<usize>, PrefixProb)> = next.into_iter().collect();
        ranked.sort_by(|a, b| {
            let sa = a.1.total() + bonus * a.0.len() as f64;
            let sb = b.1.total() + bonus * b.0.len() as f64;
            sb.total_cmp(&sa).then_with(|| a.0.cmp(&b.0))
        });
        ranked.truncate(beam_width);
        beams = ranked;
    }

    Ok(beams
        .into_iter()
        .map(|(labels, prob)| {
            let score = prob.total() + bonus * labels.len() as f64;
            Hypothesis { labels, score }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;

    fn uniform_lattice(t: usize, v: usize) -> LogProbLattice {
        LogProbLattice::from_logits(t, v, &vec![0.0; t * v]).unwrap()
    }

    fn random_lattice(t: usize, v: usize, rng: &mut Rng) -> LogProbLattice {
        let logits: Vec<f64> = (0..t * v).map(|_| rng.normal() * 2.0).collect();
        LogProbLattice::from_logits(t, v, &logits).unwrap()
    }

    /// One-hot-ish lattice spelling the given path.
    fn path_lattice(path: &[usize], v: usize) -> LogProbLattice {
        let mut logits = vec![0.0f64; path.len() * v];
        for (t, &k) in path.iter().enumerate() {
            logits[t * v + k] = 50.0;
        }
        LogProbLattice::from_logits(path.len(), v, &logits).unwrap()
    }

    #[test]
    fn collapse_merges_then_deblanks() {
        // [h h ∅ e l ∅ l o] with letters as ids
        assert_eq!(
            collapse(&[8, 8, 0, 5, 12, 0, 12, 15], 0),
            vec![8, 5, 12, 12, 15]
        );
        assert_eq!(collapse(&[0, 0, 0], 0), Vec::<usize>::new());
    }

    #[test]
    fn collapse_invariant_under_frame_duplication() {
        // Stretching every frame must not change the label sequence, and the
        // output never contains blanks.
        let mut rng = Rng::seed(5);
        for _ in 0..200 {
            let path: Vec<usize> = (0..12).map(|_| rng.below(4)).collect();
            let doubled: Vec<usize> = path.iter().flat_map(|&id| [id, id]).collect();
            let once = collapse(&path, 0);
            assert_eq!(collapse(&doubled, 0), once);
            assert!(!once.contains(&0));
        }
    }

    #[test]
    fn greedy_decodes_spelled_path() {
        let lat = path_lattice(&[1, 1, 0, 2], 3);
        assert_eq!(greedy_decode(&lat).unwrap(), vec![1, 2]);
    }

    #[test]
    fn greedy_all_blank_is_empty() {
        let lat = path_lattice(&[0, 0, 0, 0], 3);
        assert_eq!(greedy_decode(&lat).unwrap(), Vec::<usize>::new());
    }

    #[test]
    fn greedy_matches_brute_force_best_path() {
        let mut rng = Rng::seed(31);
        for _ in 0..50 {
            let t = 1 + rng.below(4);
            let v = 2 + rng.below(2);
            let lat = random_lattice(t, v, &mut rng);
            // enumerate all paths, pick max joint probability, collapse
            let mut best_path = vec![0usize; t];
            let mut best_lp = f64::NEG_INFINITY;
            let mut path = vec![0usize; t];
            'outer: loop {
                let lp: f64 = path.iter().enumerate().map(|(i, &k)| lat.get(i, k)).sum();
                if lp > best_lp {
                    best_lp = lp;
                    best_path = path.clone();
                }
                let mut i = 0;
                loop {
                    if i == t {
                        break 'outer;
                    }
                    path[i] += 1;
                    if path[i] < v {
                        break;
                    }
                    path[i] = 0;
                    i += 1;
                }
            }
            assert_eq!(greedy_decode(&lat).unwrap(), collapse(&best_path, 0));
        }
    }

    /// Exact marginal argmax over label sequences by path enumeration.
    fn exact_marginal_best(lat: &LogProbLattice) -> (Vec<usize>, f64) {
        let t = lat.timesteps();
        let v = lat.vocab_size();
        let mut mass: HashMap<Vec<usize>, f64> = HashMap::new();
        let mut path = vec![0usize; t];
        'outer: loop {
            let lp: f64 = path.iter().enumerate().map(|(i, &k)| lat.get(i, k)).sum();
            *mass.entry(collapse(&path, 0)).or_insert(0.0) += lp.exp();
            let mut i = 0;
            loop {
                if i == t {
                    break 'outer;
                }
                path[i] += 1;
                if path[i] < v {
                    break;
                }
                path[i] = 0;
                i += 1;
            }
        }
        mass.into_iter()
            .map(|(k, p)| (k, p.ln()))
            .max_by(|a, b| a.1.total_cmp(&b.1))
            .unwrap()
    }

    #[test]
    fn exhaustive_beam_equals_exact_marginal_argmax() {
        let mut rng = Rng::seed(77);
        for _ in 0..60 {
            let t = 1 + rng.below(3);
            let v = 2 + rng.below(2);
            let lat = random_lattice(t, v, &mut rng);
            let beam = beam_decode(&lat, 1000, None).unwrap();
            let (best_labels, best_lp) = exact_marginal_best(&lat);
            assert_eq!(beam[0].labels, best_labels, "t={t} v={v}");
            assert!((beam[0].score - best_lp).abs() < 1e-9);
        }
    }

    #[test]
    fn deterministic_lattice_scores_near_zero() {
        let lat = path_lattice(&[1, 0, 2, 2], 3);
        let beam = beam_decode(&lat, 4, None).unwrap();
        assert_eq!(beam[0].labels, vec![1, 2]);
        assert!(beam[0].score.abs() < 1e-6, "score {}", beam[0].score);
    }

    #[test]
    fn scores_weakly_decrease() {
        let mut rng = Rng::seed(13);
        let lat = random_lattice(6, 3, &mut rng);
        let beam = beam_decode(&lat, 8, None).unwrap();
        for pair in beam.windows(2) {
            assert!(pair[0].score >= pair[1].score);
        }
    }

    #[test]
    fn beam_width_one_is_single_hypothesis() {
        let lat = uniform_lattice(3, 3);
        let beam = beam_decode(&lat, 1, None).unwrap();
        assert_eq!(beam.len(), 1);
    }

    #[test]
    fn length_bonus_prefers_longer_hypotheses() {
        let mut rng = Rng::seed(4);
        let lat = random_lattice(6, 3, &mut rng);
        let plain = beam_decode(&lat, 16, None).unwrap();
        let bonused = beam_decode(&lat, 16, Some(5.0)).unwrap();
        let mean_len_plain: f64 =
            plain.iter().map(|h| h.labels.len() as f64).sum::<f64>() / plain.len() as f64;
        let mean_len_bonused: f64 =
            bonused.iter().map(|h| h.labels.len() as f64).sum::<f64>() / bonused.len() as f64;
        assert!(bonused[0].labels.len() >= plain[0].labels.len());
        assert!(mean_len_bonused >= mean_len_plain);
    }
}
