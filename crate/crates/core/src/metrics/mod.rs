//! Text evaluation metrics: corpus BLEU, ROUGE-1/2/L F1, and WER/CER.
//!
//! Tokenization is whitespace over normalized text; callers normalize first.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Corpus-level report; `rouge` columns are F1.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct MetricsReport {
    pub bleu: f64,
    pub rouge1_f: f64,
    pub rouge2_f: f64,
    pub rougel_f: f64,
    pub wer: f64,
    pub cer: f64,
    pub hypotheses: usize,
    pub reference_tokens: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Smoothing {
    None,
    /// Adds 1e-9 to zero clipped-match counts.
    Epsilon,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EditUnit {
    Word,
    Char,
}

const EPSILON: f64 = 1e-9;

fn tokens(text: &str) -> Vec<&str> {
    text.split_whitespace().collect()
}

fn ngram_counts<'a>(toks: &[&'a str], n: usize) -> HashMap<Vec<&'a str>, usize> {
    let mut counts = HashMap::new();
    if toks.len() >= n {
        for w in toks.windows(n) {
            *counts.entry(w.to_vec()).or_insert(0) += 1;
        }
    }
    counts
}

/// Corpus BLEU: geometric mean of modified n-gram precisions (clipped counts)
/// times the brevity penalty exp(1 - r/c) when c < r.
///
/// Orders where no hypothesis contributes any n-gram are skipped (effective
/// order), so identity pairs score 1.0 regardless of sentence length.
pub fn bleu(
    hypotheses: &[&str],
    references: &[&str],
    max_n: usize,
    smoothing: Smoothing,
) -> Result<f64> {
    if hypotheses.len() != references.len() {
        return Err(Error::InvalidInput(format!(
            "{} hypotheses vs {} references",
            hypotheses.len(),
            references.len()
        )));
    }
    if max_n == 0 {
        return Err(Error::InvalidInput("max_n must be >= 1".into()));
    }
    if references.iter().any(|r| tokens(r).is_empty()) {
        return Err(Error::InvalidInput("empty reference".into()));
    }
    let mut matched = vec![0.0f64; max_n];
    let mut total = vec![0usize; max_n];
    let mut hyp_len = 0usize;
    let mut ref_len = 0usize;
    for (hyp, reference) in hypotheses.iter().zip(references) {
        let h = tokens(hyp);
        let r = tokens(reference);
        hyp_len += h.len();
        ref_len += r.len();
        for n in 1..=max_n {
            let h_counts = ngram_counts(&h, n);
            let r_counts = ngram_counts(&r, n);
            for (gram, &count) in &h_counts {
                let clip = r_counts.get(gram).copied().unwrap_or(0);
                matched[n - 1] += count.min(clip) as f64;
                total[n - 1] += count;
            }
        }
    }
    if hyp_len == 0 {
        return Ok(0.0);
    }
    let mut log_precision_sum = 0.0f64;
    let mut orders = 0usize;
    for n in 0..max_n {
        if total[n] == 0 {
            // no hypothesis reaches n tokens: the order is undefined, skip it
            continue;
        }
        orders += 1;
        let mut num = matched[n];
        if num == 0.0 {
            match smoothing {
                Smoothing::None => return Ok(0.0),
                Smoothing::Epsilon => num = EPSILON,
            }
        }
        log_precision_sum += (num / total[n] as f64).ln();
    }
    if orders == 0 {
        return Ok(0.0);
    }
    let geo_mean = (log_precision_sum / orders as f64).exp();
    let bp = if hyp_len < ref_len {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    } else {
        1.0
    };
    Ok(geo_mean * bp)
}

/// ROUGE-1/2 F1 and LCS-based ROUGE-L F1 for one pair.
pub fn rouge(hypothesis: &str, reference: &str) -> Result<(f64, f64, f64)> {
    let h = tokens(hypothesis);
    let r = tokens(reference);
    if r.is_empty() {
        return Err(Error::InvalidInput("empty reference".into()));
    }
    let r1 = rouge_n_f1(&h, &r, 1);
    let r2 = rouge_n_f1(&h, &r, 2);
    let rl = rouge_l_f1(&h, &r);
    Ok((r1, r2, rl))
}

fn rouge_n_f1(h: &[&str], r: &[&str], n: usize) -> f64 {
    let h_counts = ngram_counts(h, n);
    let r_counts = ngram_counts(r, n);
    let h_total: usize = h_counts.values().sum();
    let r_total: usize = r_counts.values().sum();
    if h_total == 0 && r_total == 0 {
        // both texts are shorter than n: degenerate order, score sequence
        // equality so identity pairs stay at 1
        return if h == r { 1.0 } else { 0.0 };
    }
    if h_total == 0 || r_total == 0 {
        return 0.0;
    }
    let overlap: usize = h_counts
        .iter()
        .map(|(gram, &c)| c.min(r_counts.get(gram).copied().unwrap_or(0)))
        .sum();
    f1(overlap as f64 / h_total as f64, overlap as f64 / r_total as f64)
}

fn rouge_l_f1(h: &[&str], r: &[&str]) -> f64 {
    if h.is_empty() {
        return 0.0;
    }
    let lcs = lcs_len(h, r) as f64;
    f1(lcs / h.len() as f64, lcs / r.len() as f64)
}

fn f1(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

fn lcs_len(a: &[&str], b: &[&str]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for &ai in a {
        for (j, &bj) in b.iter().enumerate() {
            cur[j + 1] = if ai == bj {
                prev[j] + 1
            } else {
                prev[j + 1].max(cur[j])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
        cur[0] = 0;
    }
    prev[b.len()]
}

/// Corpus mean of per-pair ROUGE F1 scores.
pub fn rouge_corpus(hypotheses: &[&str], references: &[&str]) -> Result<(f64, f64, f64)> {
    if hypotheses.len() != references.len() || hypotheses.is_empty() {
        return Err(Error::InvalidInput("need equal non-empty lists".into()));
    }
    let mut acc = (0.0, 0.0, 0.0);
    for (h, r) in hypotheses.iter().zip(references) {
        let (a, b, c) = rouge(h, r)?;
        acc = (acc.0 + a, acc.1 + b, acc.2 + c);
    }
    let n = hypotheses.len() as f64;
    Ok((acc.0 / n, acc.1 / n, acc.2 / n))
}

/// Levenshtein distance (unit substitution/deletion/insertion costs) divided
/// by reference length. `Char` gives CER.
pub fn wer(hypothesis: &str, reference: &str, unit: EditUnit) -> Result<f64> {
    let (h, r) = split_units(hypothesis, reference, unit);
    if r.is_empty() {
        return Err(Error::InvalidInput("empty reference".into()));
    }
    Ok(levenshtein(&h, &r) as f64 / r.len() as f64)
}

/// Corpus WER: total edit distance over total reference length.
pub fn wer_corpus(hypotheses: &[&str], references: &[&str], unit: EditUnit) -> Result<f64> {
    if hypotheses.len() != references.len() || hypotheses.is_empty() {
        return Err(Error::InvalidInput("need equal non-empty lists".into()));
    }
    let mut dist = 0usize;
    let mut len = 0usize;
    for (hyp, reference) in hypotheses.iter().zip(references) {
        let (h, r) = split_units(hyp, reference, unit);
        if r.is_empty() {
            return Err(Error::InvalidInput("empty reference".into()));
        }
        dist += levenshtein(&h, &r);
        len += r.len();
    }
    Ok(dist as f64 / len as f64)
}

fn split_units(hyp: &str, reference: &str, unit: EditUnit) -> (Vec<String>, Vec<String>) {
    match unit {
        EditUnit::Word => (
            tokens(hyp).iter().map(|s| s.to_string()).collect(),
            tokens(reference).iter().map(|s| s.to_string()).collect(),
        ),
        EditUnit::Char => (
            hyp.chars().map(String::from).collect(),
            reference.chars().map(String::from).collect(),
        ),
    }
}

fn levenshtein<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0usize; b.len() + 1];
    for (i, ai) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, bj) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(ai != bj);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Full report over parallel hypothesis/reference lists.
pub fn score_corpus(hypotheses: &[&str], references: &[&str]) -> Result<MetricsReport> {
    let bleu_score = bleu(hypotheses, references, 4, Smoothing::Epsilon)?;
    let (rouge1_f, rouge2_f, rougel_f) = rouge_corpus(hypotheses, references)?;
    let wer_score = wer_corpus(hypotheses, references, EditUnit::Word)?;
    let cer_score = wer_corpus(hypotheses, references, EditUnit::Char)?;
    let reference_tokens = references.iter().map(|r| tokens(r).len()).sum();
    Ok(MetricsReport {
        bleu: bleu_score,
        rouge1_f,
        rouge2_f,
        rougel_f,
        wer: wer_score,
        cer: cer_score,
        hypotheses: hypotheses.len(),
        reference_tokens,
    })
}
