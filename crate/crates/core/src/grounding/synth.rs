//! Synthetic negative data and the three token-labeling schemes.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::{GroundedExample, GroundingError, LabelScheme, LabeledExample};
use crate::lm::{apply_temperature, next_logprobs, sample_token, LanguageModel, TokenId};
use crate::mix_seed;

#[derive(Clone, Debug, PartialEq)]
pub struct DataGenConfig {
    /// Sampling temperature for partial-hallucination completions; must exceed 1.
    pub hallucination_temperature: f64,
    /// Fraction of negatives produced by knowledge shuffle; the rest are partial hallucinations.
    pub mixture_ratio: f64,
    /// Task input and knowledge coincide (summarization), so shuffling is meaningless.
    pub summarization: bool,
    pub max_completion_len: usize,
    pub seed: u64,
}

impl Default for DataGenConfig {
    fn default() -> Self {
        Self {
            hallucination_temperature: 1.4,
            mixture_ratio: 0.5,
            summarization: false,
            max_completion_len: 32,
            seed: 0,
        }
    }
}

impl DataGenConfig {
    pub fn validate(&self) -> Result<(), GroundingError> {
        if !(self.hallucination_temperature > 1.0) || !self.hallucination_temperature.is_finite() {
            return Err(GroundingError::InvalidConfig(format!(
                "hallucination_temperature must be > 1, got {}",
                self.hallucination_temperature
            )));
        }
        if !(0.0..=1.0).contains(&self.mixture_ratio) {
            return Err(GroundingError::InvalidConfig(format!(
                "mixture_ratio must lie in [0, 1], got {}",
                self.mixture_ratio
            )));
        }
        if self.max_completion_len == 0 {
            return Err(GroundingError::InvalidConfig("max_completion_len must be positive".into()));
        }
        Ok(())
    }
}

fn distinct_docs(pool: &[Vec<TokenId>]) -> Vec<&Vec<TokenId>> {
    let mut out: Vec<&Vec<TokenId>> = Vec::new();
    for doc in pool {
        if !out.contains(&doc) {
            out.push(doc);
        }
    }
    out
}

fn draw_other_knowledge<'a, R: Rng>(
    pool: &'a [Vec<TokenId>],
    current: &[TokenId],
    rng: &mut R,
) -> Result<&'a Vec<TokenId>, GroundingError> {
    let docs = distinct_docs(pool);
    if docs.len() < 2 {
        return Err(GroundingError::PoolTooSmall);
    }
    let others: Vec<&Vec<TokenId>> = docs.into_iter().filter(|d| d.as_slice() != current).collect();
    others.choose(rng).copied().ok_or(GroundingError::PoolTooSmall)
}

/// Swaps the knowledge for a different document from `pool`; every
/// response token becomes ungrounded.
pub fn make_knowledge_shuffle(
    example: &GroundedExample,
    pool: &[Vec<TokenId>],
    seed: u64,
) -> Result<LabeledExample, GroundingError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let other = draw_other_knowledge(pool, &example.knowledge, &mut rng)?;
    let base = GroundedExample { knowledge: other.clone(), ..example.clone() };
    let labels = vec![0; base.response.len()];
    Ok(LabeledExample { base, labels, inflection: None, scheme: LabelScheme::TokenLevel })
}

/// Keeps the first `i` response tokens (`1 < i < |y|`, uniform) and lets
/// `lm` complete them at high temperature while conditioned on the context
/// and a swapped knowledge document. Labels are 1 for the kept tokens and 0
/// for the completion. The returned example keeps the original knowledge,
/// against which the completion is the hallucination.
pub fn make_partial_hallucination<M: LanguageModel + ?Sized>(
    example: &GroundedExample,
    pool: &[Vec<TokenId>],
    lm: &M,
    cfg: &DataGenConfig,
    seed: u64,
) -> Result<LabeledExample, GroundingError> {
    cfg.validate()?;
    let len = example.response.len();
    if len < 3 {
        return Err(GroundingError::ResponseTooShort(len));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inflection = rng.gen_range(2..len);
    let swapped = draw_other_knowledge(pool, &example.knowledge, &mut rng)?;

    let eos = lm.vocabulary().eos();
    let mut conditioning = example.context.clone();
    conditioning.extend_from_slice(swapped);
    let mut response: Vec<TokenId> = example.response[..inflection].to_vec();
    for step in 0..cfg.max_completion_len {
        let mut logits = next_logprobs(lm, &response, &conditioning)?;
        if step == 0 {
            // the completion must contain at least one token
            logits.mask(eos);
        }
        let logits = apply_temperature(&logits, cfg.hallucination_temperature)?;
        let token = sample_token(&logits, &mut rng)?;
        if token == eos {
            break;
        }
        response.push(token);
    }

    let mut labels = vec![1; inflection];
    labels.resize(response.len(), 0);
    let base = GroundedExample { response, ..example.clone() };
    Ok(LabeledExample { base, labels, inflection: Some(inflection), scheme: LabelScheme::Ripa })
}

/// Truncates the response at a uniform length in `[1, |y|]` and attaches
/// `sequence_label` to every kept token.
pub fn truncation_labels(example: &GroundedExample, sequence_label: u8, seed: u64) -> LabeledExample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let keep = rng.gen_range(1..=example.response.len().max(1));
    let mut base = example.clone();
    base.response.truncate(keep);
    let labels = vec![sequence_label; base.response.len()];
    LabeledExample { base, labels, inflection: None, scheme: LabelScheme::Truncation }
}

pub fn token_level_labels(example: &GroundedExample, sequence_label: u8) -> LabeledExample {
    let labels = vec![sequence_label; example.response.len()];
    LabeledExample { base: example.clone(), labels, inflection: None, scheme: LabelScheme::TokenLevel }
}

/// Re-expresses a generated example under another labeling scheme using
/// its sequence label. `Ripa` and `Positive` return the example unchanged.
pub fn relabel(example: &LabeledExample, scheme: LabelScheme, seed: u64) -> LabeledExample {
    match scheme {
        LabelScheme::Truncation => truncation_labels(&example.base, example.sequence_label(), seed),
        LabelScheme::TokenLevel => token_level_labels(&example.base, example.sequence_label()),
        LabelScheme::Ripa | LabelScheme::Positive => example.clone(),
    }
}

/// One positive per corpus example plus one negative per corpus example,
/// split between knowledge shuffle and partial hallucination by
/// `mixture_ratio` (no shuffles in summarization mode). Output order is
/// positive then negative for each corpus index.
pub fn build_synthetic_dataset<M: LanguageModel + ?Sized>(
    corpus: &[GroundedExample],
    lm: &M,
    cfg: &DataGenConfig,
) -> Result<Vec<LabeledExample>, GroundingError> {
    cfg.validate()?;
    let n = corpus.len();
    if n < 2 {
        return Err(GroundingError::CorpusTooSmall(n));
    }
    let pool: Vec<Vec<TokenId>> = corpus.iter().map(|e| e.knowledge.clone()).collect();
    let shuffles = if cfg.summarization { 0 } else { (cfg.mixture_ratio * n as f64).round() as usize };
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.seed));
    let mut is_shuffle = vec![false; n];
    for &i in &order[..shuffles] {
        is_shuffle[i] = true;
    }

    let pairs: Vec<[LabeledExample; 2]> = (0..n)
        .into_par_iter()
        .map(|i| {
            let seed = mix_seed(cfg.seed ^ i as u64, 0x5eed);
            let ex = &corpus[i];
            let negative = if is_shuffle[i] {
                make_knowledge_shuffle(ex, &pool, seed)?
            } else {
                make_partial_hallucination(ex, &pool, lm, cfg, seed)?
            };
            Ok([LabeledExample::positive(ex.clone()), negative])
        })
        .collect::<Result<_, GroundingError>>()?;
    Ok(pairs.into_iter().flatten().collect())
}
