//! Generation metrics: perplexity, intra-response distinct-n, ROUGE-L and a
//! stem/synonym-free METEOR.

use std::collections::HashSet;
use std::hash::Hash;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{EncodedExample, EOS};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricError {
    #[error("perplexity over zero tokens")]
    NoTokens,
    #[error("non-finite negative log-likelihood {0}")]
    NonFinite(f64),
    #[error("empty test set")]
    EmptyTestSet,
}

/// `exp(total_nll / tokens)`.
pub fn perplexity_from_nll(total_nll: f64, tokens: usize) -> Result<f64, MetricError> {
    if tokens == 0 {
        return Err(MetricError::NoTokens);
    }
    if !total_nll.is_finite() {
        return Err(MetricError::NonFinite(total_nll));
    }
    Ok((total_nll / tokens as f64).exp())
}

/// Add-one smoothed unigram model over response tokens (EOS included),
/// fitted on `train` and scored on `test`.
pub fn unigram_perplexity(train: &[EncodedExample], test: &[EncodedExample], vocab_size: usize) -> Result<f64, MetricError> {
    let mut counts = vec![1.0f64; vocab_size];
    for ex in train {
        for &t in ex.response.iter().chain(std::iter::once(&EOS)) {
            counts[t] += 1.0;
        }
    }
    let total: f64 = counts.iter().sum();
    let mut nll = 0.0;
    let mut n = 0;
    for ex in test {
        for &t in ex.response.iter().chain(std::iter::once(&EOS)) {
            nll -= (counts[t] / total).ln();
            n += 1;
        }
    }
    perplexity_from_nll(nll, n)
}

/// Unique n-grams over total n-grams within one response; 1.0 when the
/// response is shorter than `n`.
pub fn distinct_n<T: Hash + Eq>(response: &[T], n: usize) -> f64 {
    assert!(n >= 1, "n-gram order must be positive");
    if response.len() < n {
        return 1.0;
    }
    let grams: Vec<&[T]> = response.windows(n).collect();
    let unique: HashSet<&[T]> = grams.iter().copied().collect();
    unique.len() as f64 / grams.len() as f64
}

/// Mean of [`distinct_n`] over responses; 0 for no responses.
pub fn corpus_distinct_n<T: Hash + Eq, S: AsRef<[T]>>(responses: &[S], n: usize) -> f64 {
    if responses.is_empty() {
        return 0.0;
    }
    responses.iter().map(|r| distinct_n(r.as_ref(), n)).sum::<f64>() / responses.len() as f64
}

pub fn lcs_len<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    if a.is_empty() || b.is_empty() {
        return 0;
    }
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { cur[j].max(prev[j + 1]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RougeL {
    pub p: f64,
    pub r: f64,
    pub f1: f64,
}

pub fn rouge_l<T: PartialEq>(hypothesis: &[T], reference: &[T]) -> RougeL {
    if hypothesis.is_empty() || reference.is_empty() {
        return RougeL::default();
    }
    let lcs = lcs_len(hypothesis, reference) as f64;
    let p = lcs / hypothesis.len() as f64;
    let r = lcs / reference.len() as f64;
    let f1 = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
    RougeL { p, r, f1 }
}

/// Exact-match unigram alignment, each hypothesis token taking the leftmost
/// unused reference token. Returns `(matches, chunks)`.
pub fn unigram_alignment<T: PartialEq>(hypothesis: &[T], reference: &[T]) -> (usize, usize) {
    let mut used = vec![false; reference.len()];
    let mut matches = 0;
    let mut chunks = 0;
    let mut last: Option<(usize, usize)> = None;
    for (i, h) in hypothesis.iter().enumerate() {
        let Some(j) = (0..reference.len()).find(|&j| !used[j] && reference[j] == *h) else {
            continue;
        };
        used[j] = true;
        matches += 1;
        match last {
            Some((pi, pj)) if pi + 1 == i && pj + 1 == j => {}
            _ => chunks += 1,
        }
        last = Some((i, j));
    }
    (matches, chunks)
}

pub fn meteor_lite<T: PartialEq>(hypothesis: &[T], reference: &[T]) -> f64 {
    let (matches, chunks) = unigram_alignment(hypothesis, reference);
    if matches == 0 {
        return 0.0;
    }
    let m = matches as f64;
    let p = m / hypothesis.len() as f64;
    let r = m / reference.len() as f64;
    let f_mean = 10.0 * p * r / (r + 9.0 * p);
    let penalty = 0.5 * (chunks as f64 / m).powi(3);
    f_mean * (1.0 - penalty)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExampleRow {
    pub response: String,
    pub reference: String,
    pub length: usize,
    pub distinct_1: f64,
    pub distinct_2: f64,
    pub distinct_3: f64,
    pub rouge_l: RougeL,
    pub meteor: f64,
    pub corrupted: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub prior_log_variance: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ue: Option<i32>,
}

impl ExampleRow {
    pub fn score(response: &str, reference: &str) -> Self {
        let hyp: Vec<&str> = response.split_whitespace().collect();
        let refs: Vec<&str> = reference.split_whitespace().collect();
        Self {
            response: response.to_string(),
            reference: reference.to_string(),
            length: hyp.len(),
            distinct_1: distinct_n(&hyp, 1),
            distinct_2: distinct_n(&hyp, 2),
            distinct_3: distinct_n(&hyp, 3),
            rouge_l: rouge_l(&hyp, &refs),
            meteor: meteor_lite(&hyp, &refs),
            corrupted: false,
            prior_log_variance: None,
            ue: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub ppl: f64,
    pub distinct_1: f64,
    pub distinct_2: f64,
    pub distinct_3: f64,
    pub rouge_l_p: f64,
    pub rouge_l_r: f64,
    pub rouge_l_f1: f64,
    pub meteor: f64,
    pub avg_length: f64,
    pub ue_score: Option<f64>,
    pub prior_log_variance_clean: Option<f64>,
    pub prior_log_variance_corrupted: Option<f64>,
    pub rows: Vec<ExampleRow>,
}

fn mean_of(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

impl MetricReport {
    /// Aggregates per-example rows; `ppl` is supplied by the caller.
    pub fn from_rows(ppl: f64, rows: Vec<ExampleRow>) -> Result<Self, MetricError> {
        if rows.is_empty() {
            return Err(MetricError::EmptyTestSet);
        }
        let n = rows.len() as f64;
        let avg = |f: &dyn Fn(&ExampleRow) -> f64| rows.iter().map(f).sum::<f64>() / n;
        let ue_score = if rows.iter().all(|r| r.ue.is_some()) {
            mean_of(rows.iter().filter_map(|r| r.ue.map(f64::from)))
        } else {
            None
        };
        Ok(Self {
            ppl,
            distinct_1: avg(&|r| r.distinct_1),
            distinct_2: avg(&|r| r.distinct_2),
            distinct_3: avg(&|r| r.distinct_3),
            rouge_l_p: avg(&|r| r.rouge_l.p),
            rouge_l_r: avg(&|r| r.rouge_l.r),
            rouge_l_f1: avg(&|r| r.rouge_l.f1),
            meteor: avg(&|r| r.meteor),
            avg_length: avg(&|r| r.length as f64),
            ue_score,
            prior_log_variance_clean: mean_of(
                rows.iter().filter(|r| !r.corrupted).filter_map(|r| r.prior_log_variance),
            ),
            prior_log_variance_corrupted: mean_of(
                rows.iter().filter(|r| r.corrupted).filter_map(|r| r.prior_log_variance),
            ),
            rows,
        })
    }
}
