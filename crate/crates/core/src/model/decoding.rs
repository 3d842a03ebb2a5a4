use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{BOS, EOS, PAD};

/// Token selection rule for autoregressive decoding.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum DecodeStrategy {
    Greedy,
    TopK { k: usize },
    Temperature { tau: f64 },
}

impl FromStr for DecodeStrategy {
    type Err = String;

    /// `greedy`, `topk:K` or `temp:T`.
    fn from_str(s: &str) -> Result<Self, String> {
        if s == "greedy" {
            return Ok(Self::Greedy);
        }
        if let Some(k) = s.strip_prefix("topk:") {
            let k: usize = k.parse().map_err(|_| format!("bad top-k value in {s:?}"))?;
            if k == 0 {
                return Err("top-k needs k >= 1".into());
            }
            return Ok(Self::TopK { k });
        }
        if let Some(t) = s.strip_prefix("temp:") {
            let tau: f64 = t.parse().map_err(|_| format!("bad temperature in {s:?}"))?;
            if !(tau > 0.0 && tau.is_finite()) {
                return Err("temperature must be positive".into());
            }
            return Ok(Self::Temperature { tau });
        }
        Err(format!("unknown strategy {s:?}; expected greedy, topk:K or temp:T"))
    }
}

impl fmt::Display for DecodeStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Greedy => write!(f, "greedy"),
            Self::TopK { k } => write!(f, "topk:{k}"),
            Self::Temperature { tau } => write!(f, "temp:{tau}"),
        }
    }
}

fn sample_softmax<R: Rng + ?Sized>(candidates: &[(usize, f64)], tau: f64, rng: &mut R) -> usize {
    let max = candidates.iter().map(|c| c.1).fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = candidates.iter().map(|c| ((c.1 - max) / tau).exp()).collect();
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (c, w) in candidates.iter().zip(&weights) {
        if u < *w {
            return c.0;
        }
        u -= w;
    }
    candidates.last().expect("non-empty").0
}

/// Picks the next token from one row of logits. PAD and BOS are never
/// emitted.
pub fn select<R: Rng + ?Sized>(logits: &[f64], strategy: &DecodeStrategy, rng: &mut R) -> usize {
    let mut candidates: Vec<(usize, f64)> =
        logits.iter().copied().enumerate().filter(|(i, _)| *i != PAD && *i != BOS).collect();
    match strategy {
        DecodeStrategy::Greedy => {
            // first maximum wins ties
            let mut best = candidates[0];
            for &c in &candidates[1..] {
                if c.1 > best.1 {
                    best = c;
                }
            }
            best.0
        }
        DecodeStrategy::TopK { k } => {
            candidates.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
            candidates.truncate((*k).max(1));
            sample_softmax(&candidates, 1.0, rng)
        }
        DecodeStrategy::Temperature { tau } => sample_softmax(&candidates, *tau, rng),
    }
}

/// Runs `next_logits(prefix)` from `[BOS]` until EOS or `max_len` tokens.
/// Returns the emitted tokens without BOS/EOS.
pub fn decode_loop<E, R: Rng + ?Sized>(
    mut next_logits: impl FnMut(&[usize]) -> Result<Vec<f64>, E>,
    strategy: &DecodeStrategy,
    max_len: usize,
    rng: &mut R,
) -> Result<Vec<usize>, E> {
    let mut prefix = vec![BOS];
    while prefix.len() <= max_len {
        let logits = next_logits(&prefix)?;
        let token = select(&logits, strategy, rng);
        if token == EOS {
            break;
        }
        prefix.push(token);
    }
    Ok(prefix[1..].to_vec())
}
