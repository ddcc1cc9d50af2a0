//! Logit-bias composition for remote models that only accept an additive
//! per-token bias: `Z_i = Z_i^LLM + alpha * (Z~_i + ln f_i)`.

use std::collections::BTreeMap;

use crate::lm::{LogitVector, TokenId};
use crate::scalar::Scalar;

/// Largest bias magnitude accepted on the wire.
pub const BIAS_LIMIT: f64 = 100.0;
/// Scores below this are raised to it before taking the log.
pub const SCORE_FLOOR: f64 = 1e-6;

/// Sparse additive bias keyed by token id.
pub type LogitBias<S = f64> = BTreeMap<TokenId, S>;

/// Unclamped `alpha * (proxy_i + ln max(f_i, floor))` for every token with a
/// finite proxy logit. Tokens missing from `scores` count as scoring 0.
pub fn raw_logit_bias_terms<S: Scalar>(
    proxy: &LogitVector<S>,
    scores: &BTreeMap<TokenId, S>,
    alpha: S,
) -> LogitBias<S> {
    let floor = S::lit(SCORE_FLOOR);
    proxy
        .unmasked()
        .map(|i| {
            let f = scores.get(&i).copied().unwrap_or(S::zero());
            let f = if f > floor { f } else { floor };
            (i, alpha * (proxy[i] + f.ln()))
        })
        .collect()
}

/// [`raw_logit_bias_terms`] clamped to `[-BIAS_LIMIT, BIAS_LIMIT]`.
pub fn logit_bias_terms<S: Scalar>(proxy: &LogitVector<S>, scores: &BTreeMap<TokenId, S>, alpha: S) -> LogitBias<S> {
    let limit = S::lit(BIAS_LIMIT);
    raw_logit_bias_terms(proxy, scores, alpha)
        .into_iter()
        .map(|(i, b)| (i, b.max(-limit).min(limit)))
        .collect()
}

/// Adds `bias` to `base`. Masked base entries stay masked; ids outside the
/// vector are ignored.
pub fn apply_logit_bias<S: Scalar>(base: &LogitVector<S>, bias: &LogitBias<S>) -> LogitVector<S> {
    let mut values = base.values().to_vec();
    for (&i, &b) in bias {
        if let Some(v) = values.get_mut(i) {
            *v += b;
        }
    }
    LogitVector::new(values)
}

/// Base logits shifted by the clamped bias of every proxy candidate.
pub fn compose_logit_bias<S: Scalar>(
    base: &LogitVector<S>,
    proxy: &LogitVector<S>,
    scores: &BTreeMap<TokenId, S>,
    alpha: S,
) -> LogitVector<S> {
    apply_logit_bias(base, &logit_bias_terms(proxy, scores, alpha))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn scores(v: &[(TokenId, f64)]) -> BTreeMap<TokenId, f64> {
        v.iter().copied().collect()
    }

    #[test]
    fn alpha_zero_is_identity() {
        let base = LogitVector::new(vec![0.5, -1.0, 2.0]);
        let proxy = LogitVector::new(vec![1.0, 3.0, f64::NEG_INFINITY]);
        let out = compose_logit_bias(&base, &proxy, &scores(&[(0, 0.3), (1, 0.0)]), 0.0);
        assert_eq!(out, base);
    }

    #[test]
    fn single_term_arithmetic() {
        let proxy = LogitVector::new(vec![2.0]);
        let b = logit_bias_terms(&proxy, &scores(&[(0, 0.5)]), 1.0);
        assert!((b[&0] - (2.0 + 0.5f64.ln())).abs() < 1e-15);
        assert!((b[&0] - 1.3069).abs() < 1e-4);
        let b32 = logit_bias_terms(&LogitVector::new(vec![2.0f32]), &[(0, 0.5f32)].into_iter().collect(), 1.0);
        assert!((b32[&0] - 1.3069).abs() < 1e-4);
    }

    #[test]
    fn clamps_and_floors() {
        let proxy = LogitVector::new(vec![500.0, -500.0, 0.0]);
        let b = logit_bias_terms(&proxy, &scores(&[(0, 1.0), (1, 1.0), (2, 0.0)]), 1.0);
        assert_eq!(b[&0], 100.0);
        assert_eq!(b[&1], -100.0);
        assert!((b[&2] - SCORE_FLOOR.ln()).abs() < 1e-12);
    }

    #[test]
    fn non_candidates_unchanged() {
        let base = LogitVector::new(vec![1.0, 2.0, f64::NEG_INFINITY, 4.0]);
        let proxy = LogitVector::new(vec![0.0, f64::NEG_INFINITY, 1.0, f64::NEG_INFINITY]);
        let out = compose_logit_bias(&base, &proxy, &scores(&[(0, 1.0), (2, 1.0)]), 2.0);
        assert_eq!(out.values()[1], 2.0);
        assert_eq!(out.values()[3], 4.0);
        assert!(out.is_masked(2));
        assert_eq!(out.values()[0], 1.0);
    }

    proptest! {
        #[test]
        fn composition_is_additive_in_alpha(
            proxy in prop::collection::vec(-10.0f64..10.0, 1..8),
            f in prop::collection::vec(0.0f64..1.0, 8),
            a1 in 0.0f64..3.0,
            a2 in 0.0f64..3.0,
        ) {
            let proxy = LogitVector::new(proxy);
            let s: BTreeMap<_, _> = f.iter().copied().enumerate().collect();
            let base = LogitVector::new(vec![0.0; proxy.len()]);
            let twice = apply_logit_bias(&apply_logit_bias(&base, &raw_logit_bias_terms(&proxy, &s, a1)), &raw_logit_bias_terms(&proxy, &s, a2));
            let once = apply_logit_bias(&base, &raw_logit_bias_terms(&proxy, &s, a1 + a2));
            for (x, y) in twice.values().iter().zip(once.values()) {
                prop_assert!((x - y).abs() <= 1e-9 * (1.0 + y.abs()));
            }
        }

        #[test]
        fn clamped_terms_stay_on_the_wire(
            proxy in prop::collection::vec(-1e4f64..1e4, 1..8),
            f in prop::collection::vec(0.0f64..1.0, 8),
            alpha in 0.0f64..50.0,
        ) {
            let s: BTreeMap<_, _> = f.iter().copied().enumerate().collect();
            for b in logit_bias_terms(&LogitVector::new(proxy), &s, alpha).values() {
                prop_assert!(b.abs() <= BIAS_LIMIT);
            }
        }
    }
}
