//! Forward-backward CTC loss over the blank-interleaved extended target.

use crate::numerics::kernels::logsumexp;
use crate::tokenizers::TokenSequence;
use crate::{Error, Result};

use super::{validate_lattice, LogProbLattice};

/// Loss, gradient, and per-timestep symbol posterior.
#[derive(Clone, Debug)]
pub struct CtcResult {
    /// -log p(target | lattice); never negative.
    pub loss: f64,
    /// d loss / d lattice entry, laid out like the lattice (T x V).
    pub grad: Vec<f64>,
    /// Posterior occupancy gamma (T x V); each row sums to 1.
    pub occupancy: Vec<f64>,
}

/// CTC loss with validation: rejects invalid lattices (the negative-loss
/// pathology surfaces here as `InvalidLogProb`, never as a negative value).
pub fn ctc_loss(lattice: &LogProbLattice, target: &TokenSequence) -> Result<CtcResult> {
    validate_lattice(lattice).into_result()?;
    ctc_loss_unvalidated(lattice, target)
}

/// Forward-backward without lattice validation.
///
/// Exists for finite-difference tooling and diagnostics that must evaluate
/// perturbed lattices; production paths go through [`ctc_loss`].
pub fn ctc_loss_unvalidated(lattice: &LogProbLattice, target: &TokenSequence) -> Result<CtcResult> {
    let v = lattice.vocab_size();
    let t_len = lattice.timesteps();
    if target.vocab.len() != v {
        return Err(Error::Shape(format!(
            "target vocabulary size {} vs lattice width {v}",
            target.vocab.len()
        )));
    }
    let blank = target.vocab.blank_id();
    if target.ids.iter().any(|&id| id == blank) {
        return Err(Error::InvalidInput("target contains blank".into()));
    }
    if let Some(&bad) = target.ids.iter().find(|&&id| id >= v) {
        return Err(Error::InvalidInput(format!("target id {bad} >= vocab {v}")));
    }
    let labels = &target.ids;
    let adjacent_pairs = labels.windows(2).filter(|w| w[0] == w[1]).count();
    let required = labels.len() + adjacent_pairs;
    if t_len < required {
        return Err(Error::TargetTooLong {
            frames: t_len,
            required,
        });
    }

    // Extended target: blank, y1, blank, y2, ..., yL, blank.
    let s_len = 2 * labels.len() + 1;
    let ext = |s: usize| -> usize {
        if s % 2 == 0 {
            blank
        } else {
            labels[(s - 1) / 2]
        }
    };
    // Skip transition s-2 -> s allowed when ext[s] is a label differing from ext[s-2].
    let can_skip = |s: usize| -> bool { s >= 2 && s % 2 == 1 && (s < 3 || ext(s) != ext(s - 2)) };

    let neg_inf = f64::NEG_INFINITY;
    let mut alpha = vec![neg_inf; t_len * s_len];
    let mut beta = vec![neg_inf; t_len * s_len];

    alpha[0] = lattice.get(0, blank);
    if s_len > 1 {
        alpha[1] = lattice.get(0, ext(1));
    }
    for t in 1..t_len {
        for s in 0..s_len {
            let mut terms = [neg_inf; 3];
            terms[0] = alpha[(t - 1) * s_len + s];
            if s >= 1 {
                terms[1] = alpha[(t - 1) * s_len + s - 1];
            }
            if can_skip(s) {
                terms[2] = alpha[(t - 1) * s_len + s - 2];
            }
            let inflow = logsumexp(&terms);
            alpha[t * s_len + s] = if inflow == neg_inf {
                neg_inf
            } else {
                inflow + lattice.get(t, ext(s))
            };
        }
    }

    beta[(t_len - 1) * s_len + s_len - 1] = 0.0;
    if s_len > 1 {
        beta[(t_len - 1) * s_len + s_len - 2] = 0.0;
    }
    for t in (0..t_len - 1).rev() {
        for s in 0..s_len {
            let mut terms = [neg_inf; 3];
            terms[0] = beta[(t + 1) * s_len + s] + lattice.get(t + 1, ext(s));
            if s + 1 < s_len {
                terms[1] = beta[(t + 1) * s_len + s + 1] + lattice.get(t + 1, ext(s + 1));
            }
            if s + 2 < s_len && can_skip(s + 2) {
                terms[2] = beta[(t + 1) * s_len + s + 2] + lattice.get(t + 1, ext(s + 2));
            }
            beta[t * s_len + s] = logsumexp(&terms);
        }
    }

    let log_z = if s_len > 1 {
        logsumexp(&[
            alpha[(t_len - 1) * s_len + s_len - 1],
            alpha[(t_len - 1) * s_len + s_len - 2],
        ])
    } else {
        alpha[(t_len - 1) * s_len]
    };
    if !log_z.is_finite() {
        return Err(Error::Data(
            "target probability underflowed to zero".into(),
        ));
    }

    let mut occupancy = vec![0.0; t_len * v];
    for t in 0..t_len {
        for s in 0..s_len {
            let a = alpha[t * s_len + s];
            let b = beta[t * s_len + s];
            if a == neg_inf || b == neg_inf {
                continue;
            }
            occupancy[t * v + ext(s)] += (a + b - log_z).exp();
        }
    }
    let grad: Vec<f64> = occupancy.iter().map(|&g| -g).collect();

    // Row slack within the validation tolerance can leave log_z microscopically
    // above zero; the loss contract is non-negative, so floor it.
    let loss = (-log_z).max(0.0);
    Ok(CtcResult {
        loss,
        grad,
        occupancy,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ctc::decode::collapse;
    use crate::numerics::Rng;
    use crate::tokenizers::Vocabulary;

    fn target(ids: Vec<usize>, v: usize) -> TokenSequence {
        TokenSequence::new(ids, Vocabulary::synthetic(v)).unwrap()
    }

    fn uniform_lattice(t: usize, v: usize) -> LogProbLattice {
        LogProbLattice::from_logits(t, v, &vec![0.0; t * v]).unwrap()
    }

    fn random_lattice(t: usize, v: usize, rng: &mut Rng) -> LogProbLattice {
        let logits: Vec<f64> = (0..t * v).map(|_| rng.normal() * 2.0).collect();
        LogProbLattice::from_logits(t, v, &logits).unwrap()
    }

    /// Exhaustive path oracle: sum probabilities of all V^T paths collapsing
    /// to the target.
    fn brute_force_loss(lattice: &LogProbLattice, labels: &[usize]) -> Option<f64> {
        let t = lattice.timesteps();
        let v = lattice.vocab_size();
        let mut total = 0.0f64;
        let mut path = vec![0usize; t];
        let mut any = false;
        loop {
            let collapsed = collapse(&path, 0);
            if collapsed == labels {
                let logp: f64 = path.iter().enumerate().map(|(i, &k)| lattice.get(i, k)).sum();
                total += logp.exp();
                any = true;
            }
            // next path in base-v counting
            let mut i = 0;
            loop {
                if i == t {
                    return if any { Some(-total.ln()) } else { None };
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

    #[test]
    fn single_frame_single_label() {
        // T=1, V=2, row [ln .5, ln .5], target [1]: only path is "a".
        let lat = uniform_lattice(1, 2);
        let res = ctc_loss(&lat, &target(vec![1], 2)).unwrap();
        assert!((res.loss - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn two_frames_three_paths() {
        // T=2, V=2 uniform: paths {aa, a-, -a} of 4 collapse to "a", p = 3/4.
        let lat = uniform_lattice(2, 2);
        let res = ctc_loss(&lat, &target(vec![1], 2)).unwrap();
        let expect = -(0.75f64).ln();
        assert!((res.loss - expect).abs() < 1e-12, "{} vs {expect}", res.loss);
    }

    #[test]
    fn matches_brute_force_on_tiny_instances() {
        let mut rng = Rng::seed(2024);
        let mut checked = 0;
        for t in 1..=4usize {
            for v in 2..=3usize {
                for len in 1..=2usize {
                    for _ in 0..8 {
                        let lat = random_lattice(t, v, &mut rng);
                        let labels: Vec<usize> =
                            (0..len).map(|_| 1 + rng.below(v - 1)).collect();
                        let adjacent =
                            labels.windows(2).filter(|w| w[0] == w[1]).count();
                        if t < labels.len() + adjacent {
                            continue;
                        }
                        let res = ctc_loss(&lat, &target(labels.clone(), v)).unwrap();
                        let oracle = brute_force_loss(&lat, &labels).unwrap();
                        assert!(
                            (res.loss - oracle).abs() < 1e-6,
                            "t={t} v={v} labels={labels:?}: {} vs {oracle}",
                            res.loss
                        );
                        checked += 1;
                    }
                }
            }
        }
        assert!(checked > 50);
    }

    #[test]
    fn occupancy_rows_sum_to_one() {
        let mut rng = Rng::seed(7);
        for _ in 0..20 {
            let lat = random_lattice(5, 3, &mut rng);
            let res = ctc_loss(&lat, &target(vec![1, 2], 3)).unwrap();
            for t in 0..5 {
                let row_sum: f64 = res.occupancy[t * 3..(t + 1) * 3].iter().sum();
                assert!((row_sum - 1.0).abs() < 1e-6, "t={t}: {row_sum}");
                let grad_sum: f64 = res.grad[t * 3..(t + 1) * 3].iter().sum();
                assert!((grad_sum + 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = Rng::seed(99);
        let t = 4;
        let v = 3;
        let lat = random_lattice(t, v, &mut rng);
        let tgt = target(vec![1, 2], v);
        let res = ctc_loss(&lat, &tgt).unwrap();
        let step = 1e-6;
        for idx in 0..t * v {
            let mut up = lat.values().to_vec();
            up[idx] += step;
            let mut down = lat.values().to_vec();
            down[idx] -= step;
            let lu = ctc_loss_unvalidated(&LogProbLattice::new(t, v, up).unwrap(), &tgt)
                .unwrap()
                .loss;
            let ld = ctc_loss_unvalidated(&LogProbLattice::new(t, v, down).unwrap(), &tgt)
                .unwrap()
                .loss;
            let fd = (lu - ld) / (2.0 * step);
            let rel = (res.grad[idx] - fd).abs() / fd.abs().max(1e-8);
            assert!(rel < 1e-4, "idx {idx}: {} vs {fd}", res.grad[idx]);
        }
    }

    #[test]
    fn rejects_positive_entries_before_computing() {
        let mut values = uniform_lattice(2, 2).values().to_vec();
        values[0] = 0.5;
        let lat = LogProbLattice::new(2, 2, values).unwrap();
        assert!(matches!(
            ctc_loss(&lat, &target(vec![1], 2)),
            Err(Error::InvalidLogProb { .. })
        ));
    }

    #[test]
    fn infeasible_target_is_too_long() {
        let lat = uniform_lattice(2, 2);
        // "aa" needs T >= 3 (blank between repeats)
        assert!(matches!(
            ctc_loss(&lat, &target(vec![1, 1], 2)),
            Err(Error::TargetTooLong { frames: 2, required: 3 })
        ));
        assert!(matches!(
            ctc_loss(&lat, &target(vec![1, 1, 1], 2)),
            Err(Error::TargetTooLong { .. })
        ));
    }

    #[test]
    fn blank_in_target_rejected() {
        let lat = uniform_lattice(2, 2);
        assert!(matches!(
            ctc_loss(&lat, &target(vec![0], 2)),
            Err(Error::InvalidInput(_))
        ));
    }
}
