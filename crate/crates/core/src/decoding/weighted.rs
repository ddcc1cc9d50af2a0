//! Per-step decoders: unguided nucleus sampling and the weighted decoders
//! that re-rank the LM's top candidates by `P(y_t | y_<t, x) * f(y_<=t, k)`.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{content, DecodeConfig, DecodeError, DecodeRequest, DecodeResult};
use crate::grounding::GroundednessScorer;
use crate::lm::{next_logprobs, sample_token, LanguageModel, LogitVector, SamplingParams, TokenId, TokenSequence};

/// Which scorer flavor drives a weighted decoder. The decoding mechanics
/// are identical; the label records which classifier was plugged in.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightedMode {
    /// Truncation-trained scorer.
    FudgeStyle,
    /// RIPA-trained scorer.
    Kwd,
}

impl fmt::Display for WeightedMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            WeightedMode::FudgeStyle => "fudge",
            WeightedMode::Kwd => "kwd",
        })
    }
}

impl FromStr for WeightedMode {
    type Err = DecodeError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "fudge" | "fudge_style" => Ok(Self::FudgeStyle),
            "kwd" => Ok(Self::Kwd),
            other => Err(DecodeError::InvalidConfig(format!("unknown weighted mode {other:?}"))),
        }
    }
}

struct Candidates {
    tokens: Vec<TokenId>,
    logprobs: Vec<f64>,
    scores: Vec<f64>,
}

impl Candidates {
    fn all_zero(&self) -> bool {
        self.scores.iter().all(|&f| f <= 0.0)
    }
}

/// Top `width` tokens by LM probability, each scored as a one-token extension.
fn score_candidates<M, G>(
    lm: &M,
    scorer: &G,
    request: &DecodeRequest,
    cfg: &DecodeConfig,
    prefix: &mut Vec<TokenId>,
    conditioning: &[TokenId],
    result: &mut DecodeResult,
) -> Result<Candidates, DecodeError>
where
    M: LanguageModel + ?Sized,
    G: GroundednessScorer + ?Sized,
{
    let eos = lm.vocabulary().eos();
    let lp = next_logprobs(lm, prefix, conditioning)?;
    result.lm_forward_calls += 1;
    let tokens: Vec<TokenId> = lp.ranked().into_iter().take(cfg.width(lm.vocabulary())).collect();
    let mut scores = Vec::with_capacity(tokens.len());
    for &t in &tokens {
        prefix.push(t);
        let f = scorer.score_prefix(content(prefix, eos), &request.knowledge);
        prefix.pop();
        scores.push(if f.is_nan() { 0.0 } else { f.clamp(0.0, 1.0) });
    }
    result.scorer_calls += tokens.len();
    let logprobs = tokens.iter().map(|&t| lp[t]).collect();
    Ok(Candidates { tokens, logprobs, scores })
}

fn is_done(prefix: &[TokenId], eos: TokenId, cfg: &DecodeConfig) -> bool {
    prefix.last() == Some(&eos) || prefix.len() >= cfg.max_new_tokens
}

/// Greedy re-ranking: each step picks the candidate maximizing
/// `ln P + ln f`, ties going to the higher `f`, then the lower token id.
/// When every candidate scores 0 the LM argmax is taken and counted in
/// `fallback_steps`.
pub fn weighted_decode<M, G>(
    lm: &M,
    scorer: &G,
    request: &DecodeRequest,
    cfg: &DecodeConfig,
    _mode: WeightedMode,
) -> Result<DecodeResult, DecodeError>
where
    M: LanguageModel + ?Sized,
    G: GroundednessScorer + ?Sized,
{
    cfg.validate()?;
    request.check()?;
    let eos = lm.vocabulary().eos();
    let conditioning = request.conditioning();
    let mut result = DecodeResult::default();
    let mut prefix = Vec::new();
    while !is_done(&prefix, eos, cfg) {
        let c = score_candidates(lm, scorer, request, cfg, &mut prefix, &conditioning, &mut result)?;
        let pick = if c.all_zero() {
            result.fallback_steps += 1;
            0
        } else {
            let key = |i: usize| c.logprobs[i] + c.scores[i].ln();
            (0..c.tokens.len())
                .max_by(|&a, &b| {
                    key(a)
                        .total_cmp(&key(b))
                        .then(c.scores[a].total_cmp(&c.scores[b]))
                        .then(c.tokens[b].cmp(&c.tokens[a]))
                })
                .expect("at least one candidate")
        };
        result.per_step_scores.push(c.scores[pick]);
        prefix.push(c.tokens[pick]);
    }
    result.tokens = TokenSequence::from_ids(prefix, eos)?;
    Ok(result.finish(Some(scorer), &request.knowledge))
}

/// Normalized `q_i ∝ exp(logprob_i) * f_i^alpha`; `None` when every weight is 0.
fn nado_distribution(logprobs: &[f64], scores: &[f64], alpha: f64) -> Option<Vec<f64>> {
    let logq: Vec<f64> = logprobs
        .iter()
        .zip(scores)
        .map(|(&lp, &f)| if f > 0.0 { lp + alpha * f.ln() } else { f64::NEG_INFINITY })
        .collect();
    let z = LogitVector::new(logq);
    (!z.is_all_masked()).then(|| z.softmax())
}

/// Samples each token from `q ∝ P * f^nado_alpha` over the top candidates,
/// with a ChaCha8 stream seeded by `cfg.seed`. All-zero steps fall back to
/// the LM argmax.
pub fn nado_weighted_sample<M, G>(
    lm: &M,
    scorer: &G,
    request: &DecodeRequest,
    cfg: &DecodeConfig,
) -> Result<DecodeResult, DecodeError>
where
    M: LanguageModel + ?Sized,
    G: GroundednessScorer + ?Sized,
{
    cfg.validate()?;
    request.check()?;
    let eos = lm.vocabulary().eos();
    let conditioning = request.conditioning();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut result = DecodeResult::default();
    let mut prefix = Vec::new();
    while !is_done(&prefix, eos, cfg) {
        let c = score_candidates(lm, scorer, request, cfg, &mut prefix, &conditioning, &mut result)?;
        let pick = match nado_distribution(&c.logprobs, &c.scores, cfg.nado_alpha) {
            Some(q) => sample_token(&LogitVector::from_probs(&q), &mut rng)?,
            None => {
                result.fallback_steps += 1;
                0
            }
        };
        result.per_step_scores.push(c.scores[pick]);
        prefix.push(c.tokens[pick]);
    }
    result.tokens = TokenSequence::from_ids(prefix, eos)?;
    Ok(result.finish(Some(scorer), &request.knowledge))
}

/// Extends `prefix` by nucleus sampling until EOS or `max_new_tokens`.
pub(crate) fn nucleus_continue<M: LanguageModel + ?Sized, R: Rng + ?Sized>(
    lm: &M,
    request: &DecodeRequest,
    cfg: &DecodeConfig,
    prefix: &mut Vec<TokenId>,
    result: &mut DecodeResult,
    rng: &mut R,
) -> Result<(), DecodeError> {
    let eos = lm.vocabulary().eos();
    let conditioning = request.conditioning();
    let params = SamplingParams {
        repetition_penalty: 1.0,
        temperature: cfg.temperature,
        top_k: cfg.width(lm.vocabulary()),
        top_p: cfg.top_p,
    };
    while !is_done(prefix, eos, cfg) {
        let lp = next_logprobs(lm, prefix, &conditioning)?;
        result.lm_forward_calls += 1;
        let t = params.sample(&lp, prefix, rng)?;
        prefix.push(t);
    }
    Ok(())
}

/// Unguided baseline: temperature, top-k (`search_width`) and top-p
/// sampling, seeded by `cfg.seed`. No scorer is involved, so
/// `final_groundedness` is left unset.
pub fn nucleus_decode<M: LanguageModel + ?Sized>(
    lm: &M,
    request: &DecodeRequest,
    cfg: &DecodeConfig,
) -> Result<DecodeResult, DecodeError> {
    cfg.validate()?;
    request.check()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut result = DecodeResult::default();
    let mut prefix = Vec::new();
    nucleus_continue(lm, request, cfg, &mut prefix, &mut result, &mut rng)?;
    result.tokens = TokenSequence::from_ids(prefix, lm.vocabulary().eos())?;
    Ok(result)
}
