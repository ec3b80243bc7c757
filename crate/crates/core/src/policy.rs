//! Masked categorical policies over a flat action set.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::env::Normalizer;
use crate::error::{Error, Result};
use crate::nn::PolicyParams;

/// Softmax restricted to legal entries; illegal entries are exactly 0.
pub fn masked_softmax(logits: &[f64], mask: &[bool]) -> Result<Vec<f64>> {
    let max = logits
        .iter()
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|(l, _)| *l)
        .fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Err(Error::AllMasked);
    }
    let mut probs: Vec<f64> = logits
        .iter()
        .zip(mask)
        .map(|(l, &m)| if m { (l - max).exp() } else { 0.0 })
        .collect();
    let total: f64 = probs.iter().sum();
    for p in &mut probs {
        *p /= total;
    }
    Ok(probs)
}

/// Log-probabilities over legal entries (`-inf` elsewhere).
pub fn masked_log_softmax(logits: &[f64], mask: &[bool]) -> Result<Vec<f64>> {
    let max = logits
        .iter()
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|(l, _)| *l)
        .fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Err(Error::AllMasked);
    }
    let lse = max
        + logits
            .iter()
            .zip(mask)
            .filter(|(_, &m)| m)
            .map(|(l, _)| (l - max).exp())
            .sum::<f64>()
            .ln();
    Ok(logits
        .iter()
        .zip(mask)
        .map(|(l, &m)| if m { l - lse } else { f64::NEG_INFINITY })
        .collect())
}

/// Draws an action index and its log-probability under the masked softmax.
pub fn sample_action(logits: &[f64], mask: &[bool], rng: &mut impl Rng) -> Result<(usize, f64)> {
    if logits.len() != mask.len() {
        return Err(Error::ShapeMismatch {
            what: "action mask",
            expected: logits.len(),
            actual: mask.len(),
        });
    }
    let logp = masked_log_softmax(logits, mask)?;
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    let mut last_legal = 0;
    for (i, lp) in logp.iter().enumerate() {
        if !mask[i] {
            continue;
        }
        last_legal = i;
        acc += lp.exp();
        if u < acc {
            return Ok((i, *lp));
        }
    }
    // Rounding left `acc` a hair below 1.
    Ok((last_legal, logp[last_legal]))
}

/// Highest-logit legal action; ties go to the lowest index.
pub fn greedy_action(logits: &[f64], mask: &[bool]) -> Result<usize> {
    let mut best: Option<usize> = None;
    for (i, &l) in logits.iter().enumerate() {
        if mask[i] && best.is_none_or(|b| l > logits[b]) {
            best = Some(i);
        }
    }
    best.ok_or(Error::AllMasked)
}

/// Network parameters together with the observation standardization they
/// were trained under.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Policy {
    pub params: PolicyParams,
    pub normalizer: Normalizer,
}

impl Policy {
    pub fn new(params: PolicyParams, normalizer: Normalizer) -> Result<Policy> {
        if normalizer.len() != params.obs_len() {
            return Err(Error::ShapeMismatch {
                what: "normalizer length",
                expected: params.obs_len(),
                actual: normalizer.len(),
            });
        }
        Ok(Policy { params, normalizer })
    }

    /// Logits and value for a raw (unnormalized) observation.
    pub fn evaluate(&self, raw_obs: &[f64]) -> Result<(Vec<f64>, f64)> {
        if raw_obs.len() != self.normalizer.len() {
            return Err(Error::ShapeMismatch {
                what: "observation",
                expected: self.normalizer.len(),
                actual: raw_obs.len(),
            });
        }
        self.params.forward(&self.normalizer.apply(raw_obs))
    }

    pub fn greedy(&self, raw_obs: &[f64], mask: &[bool]) -> Result<usize> {
        let (logits, _) = self.evaluate(raw_obs)?;
        greedy_action(&logits, mask)
    }
}
