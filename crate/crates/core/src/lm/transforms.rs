//! Logit transforms shared by the sampling decoders.
//!
//! The baseline sampling pipeline applies them in a fixed order:
//! repetition penalty, temperature, top-k, top-p, then sampling.

use std::collections::BTreeSet;

use rand::Rng;

use super::{LmError, LogitVector, TokenId};
use crate::scalar::Scalar;

pub fn apply_temperature<S: Scalar>(logits: &LogitVector<S>, temperature: S) -> Result<LogitVector<S>, LmError> {
    if !(temperature > S::zero()) || !temperature.is_finite() {
        return Err(LmError::InvalidTemperature(temperature.as_f64()));
    }
    Ok(logits.map(|v| v / temperature))
}

/// Keeps the `k` largest entries. Boundary ties keep the lower token index.
pub fn top_k_filter<S: Scalar>(logits: &LogitVector<S>, k: usize) -> Result<LogitVector<S>, LmError> {
    let n = logits.len();
    if k == 0 || k > n {
        return Err(LmError::InvalidK { k, vocab: n });
    }
    if k == n {
        return Ok(logits.clone());
    }
    let keep = logits.ranked().into_iter().take(k).collect::<BTreeSet<_>>();
    let mut out = logits.clone();
    for i in 0..n {
        if !keep.contains(&i) {
            out.mask(i);
        }
    }
    Ok(out)
}

/// Nucleus filter: keeps the smallest highest-probability set whose mass reaches `p`.
pub fn top_p_filter<S: Scalar>(logits: &LogitVector<S>, p: S) -> Result<LogitVector<S>, LmError> {
    if !(p > S::zero() && p <= S::one()) {
        return Err(LmError::InvalidP(p.as_f64()));
    }
    let probs = logits.softmax();
    // rounding slack so that e.g. 0.6 + 0.3 reaches 0.9
    let target = p - S::lit(1e-12);
    let mut keep = BTreeSet::new();
    let mut cum = S::zero();
    for i in logits.ranked() {
        keep.insert(i);
        cum += probs[i];
        if cum >= target {
            break;
        }
    }
    let mut out = logits.clone();
    for i in 0..logits.len() {
        if !keep.contains(&i) {
            out.mask(i);
        }
    }
    Ok(out)
}

/// CTRL-style penalty on tokens present in `history`: positive scores are
/// divided by `penalty`, non-positive scores multiplied by it.
pub fn repetition_penalty<S: Scalar>(
    logits: &LogitVector<S>,
    history: &[TokenId],
    penalty: S,
) -> Result<LogitVector<S>, LmError> {
    if !(penalty >= S::one()) || !penalty.is_finite() {
        return Err(LmError::InvalidPenalty(penalty.as_f64()));
    }
    let mut values = logits.values().to_vec();
    let seen: BTreeSet<TokenId> = history.iter().copied().collect();
    for t in seen {
        let v = values.get_mut(t).ok_or(LmError::TokenOutOfRange(t))?;
        *v = if *v > S::zero() { *v / penalty } else { *v * penalty };
    }
    Ok(LogitVector::new(values))
}

/// Draws an index from `softmax(logits)`.
pub fn sample_token<S: Scalar, R: Rng + ?Sized>(logits: &LogitVector<S>, rng: &mut R) -> Result<TokenId, LmError> {
    if logits.is_all_masked() {
        return Err(LmError::AllMasked);
    }
    let probs = logits.softmax();
    let u: f64 = rng.gen();
    let mut cum = 0.0;
    let mut last = 0;
    for (i, p) in probs.iter().enumerate() {
        let p = p.as_f64();
        if p <= 0.0 {
            continue;
        }
        last = i;
        cum += p;
        if u < cum {
            return Ok(i);
        }
    }
    Ok(last)
}

/// Settings for the baseline sampling pipeline.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SamplingParams {
    pub repetition_penalty: f64,
    pub temperature: f64,
    pub top_k: usize,
    pub top_p: f64,
}

impl SamplingParams {
    pub fn apply<S: Scalar>(&self, logits: &LogitVector<S>, history: &[TokenId]) -> Result<LogitVector<S>, LmError> {
        let z = repetition_penalty(logits, history, S::lit(self.repetition_penalty))?;
        let z = apply_temperature(&z, S::lit(self.temperature))?;
        let z = top_k_filter(&z, self.top_k.min(z.len()))?;
        top_p_filter(&z, S::lit(self.top_p))
    }

    pub fn sample<S: Scalar, R: Rng + ?Sized>(
        &self,
        logits: &LogitVector<S>,
        history: &[TokenId],
        rng: &mut R,
    ) -> Result<TokenId, LmError> {
        sample_token(&self.apply(logits, history)?, rng)
    }
}
