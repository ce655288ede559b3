//! ROUGE-1, ROUGE-2, and ROUGE-L evaluation on word-level tokens.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Precision, recall, and their harmonic mean for one pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RougeScore {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl RougeScore {
    fn from_counts(matches: f64, hyp_total: f64, ref_total: f64) -> Self {
        let precision = if hyp_total > 0.0 { matches / hyp_total } else { 0.0 };
        let recall = if ref_total > 0.0 { matches / ref_total } else { 0.0 };
        RougeScore {
            precision,
            recall,
            f1: f1(precision, recall),
        }
    }
}

/// Harmonic mean of precision and recall; zero when both are zero.
fn f1(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

/// ROUGE-N with clipped n-gram counts. `n` must be 1 or 2.
pub fn rouge_n(reference: &[String], hypothesis: &[String], n: usize) -> RougeScore {
    assert!(n == 1 || n == 2, "only unigram and bigram ROUGE are defined");
    let ref_counts = ngram_counts(reference, n);
    let hyp_counts = ngram_counts(hypothesis, n);
    let matches: usize = hyp_counts
        .iter()
        .map(|(gram, &count)| count.min(ref_counts.get(gram).copied().unwrap_or(0)))
        .sum();
    let ref_total = reference.len().saturating_sub(n - 1);
    let hyp_total = hypothesis.len().saturating_sub(n - 1);
    RougeScore::from_counts(matches as f64, hyp_total as f64, ref_total as f64)
}

fn ngram_counts<'a>(tokens: &'a [String], n: usize) -> HashMap<&'a [String], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for gram in tokens.windows(n) {
            *counts.entry(gram).or_insert(0) += 1;
        }
    }
    counts
}

/// ROUGE-L from the longest common subsequence.
pub fn rouge_l(reference: &[String], hypothesis: &[String]) -> RougeScore {
    let lcs = lcs_len(reference, hypothesis);
    RougeScore::from_counts(lcs as f64, hypothesis.len() as f64, reference.len() as f64)
}

/// Longest-common-subsequence length via the standard dynamic program.
pub fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut curr = vec![0usize; b.len() + 1];
    for ai in a {
        for (j, bj) in b.iter().enumerate() {
            curr[j + 1] = if ai == bj {
                prev[j] + 1
            } else {
                prev[j + 1].max(curr[j])
            };
        }
        std::mem::swap(&mut prev, &mut curr);
    }
    prev[b.len()]
}

/// All three metrics for one reference/hypothesis pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairRouge {
    pub rouge1: RougeScore,
    pub rouge2: RougeScore,
    pub rouge_l: RougeScore,
}

pub fn score_pair(reference: &[String], hypothesis: &[String]) -> PairRouge {
    PairRouge {
        rouge1: rouge_n(reference, hypothesis, 1),
        rouge2: rouge_n(reference, hypothesis, 2),
        rouge_l: rouge_l(reference, hypothesis),
    }
}

/// Corpus-level report: macro-averaged F1 scaled to 0-100.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Report {
    pub rouge1: f64,
    pub rouge2: f64,
    #[serde(rename = "rougeL")]
    pub rouge_l: f64,
    pub n_pairs: usize,
}

/// Scores every (reference, hypothesis) token pair and macro-averages the
/// F1 values. Errors on an empty pair list.
pub fn evaluate_corpus(pairs: &[(Vec<String>, Vec<String>)]) -> Result<(Report, Vec<PairRouge>)> {
    if pairs.is_empty() {
        return Err(Error::InvalidArgument(
            "cannot evaluate an empty pair list".into(),
        ));
    }
    let per_pair: Vec<PairRouge> = pairs
        .iter()
        .map(|(reference, hypothesis)| score_pair(reference, hypothesis))
        .collect();
    let n = per_pair.len() as f64;
    let mean = |f: fn(&PairRouge) -> f64| per_pair.iter().map(f).sum::<f64>() / n * 100.0;
    let report = Report {
        rouge1: mean(|p| p.rouge1.f1),
        rouge2: mean(|p| p.rouge2.f1),
        rouge_l: mean(|p| p.rouge_l.f1),
        n_pairs: per_pair.len(),
    };
    Ok((report, per_pair))
}
