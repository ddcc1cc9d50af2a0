use std::collections::BTreeSet;

use super::{next_logprobs, LanguageModel, LmError, LogitVector, TokenId, Vocabulary};

/// Mixes a base model with a uniform copy distribution over the distinct
/// non-EOS tokens of the conditioning sequence:
/// `p = (1 - weight) * p_base + weight * copy`.
///
/// Gives toy models a dependence on their conditioning, so a swapped
/// knowledge document steers generations away from the original one.
#[derive(Clone, Debug)]
pub struct CopyMixLm<M> {
    base: M,
    weight: f64,
}

impl<M: LanguageModel> CopyMixLm<M> {
    pub fn new(base: M, weight: f64) -> Self {
        assert!((0.0..=1.0).contains(&weight), "copy weight must lie in [0, 1]");
        Self { base, weight }
    }

    pub fn base(&self) -> &M {
        &self.base
    }
}

impl<M: LanguageModel> LanguageModel for CopyMixLm<M> {
    fn vocabulary(&self) -> &Vocabulary {
        self.base.vocabulary()
    }

    fn next_logits(&self, prefix: &[TokenId], conditioning: &[TokenId]) -> Result<LogitVector, LmError> {
        let base = next_logprobs(&self.base, prefix, conditioning)?;
        let eos = self.vocabulary().eos();
        let support: BTreeSet<TokenId> = conditioning
            .iter()
            .copied()
            .filter(|&t| t != eos && t < base.len())
            .collect();
        if support.is_empty() || self.weight == 0.0 {
            return Ok(base);
        }
        let copy = self.weight / support.len() as f64;
        let mut probs: Vec<f64> = base.softmax().iter().map(|p| p * (1.0 - self.weight)).collect();
        for t in support {
            probs[t] += copy;
        }
        Ok(LogitVector::from_probs(&probs))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lm::TableLm;

    #[test]
    fn mixes_towards_conditioning() {
        let vocab = Vocabulary::new(["a", "b", "c", "</s>"], "</s>").unwrap();
        let lm = CopyMixLm::new(TableLm::new(vocab, 1), 0.5);
        let p = next_logprobs(&lm, &[], &[2, 2, 3]).unwrap().softmax();
        assert!((p[2] - (0.125 + 0.5)).abs() < 1e-12);
        assert!((p[0] - 0.125).abs() < 1e-12);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let q = next_logprobs(&lm, &[], &[]).unwrap().softmax();
        assert!((q[0] - 0.25).abs() < 1e-12);
    }
}
