//! Decoding strategies guided by a groundedness scorer.
//!
//! All decoders share [`DecodeConfig`] and report a [`DecodeResult`] with
//! job-local call counters. The language model sees the task input
//! followed by the knowledge document as its conditioning sequence.

mod bias;
mod kcts;
mod oracle;
mod tree;
mod weighted;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grounding::GroundednessScorer;
use crate::lm::{LmError, TokenId, TokenSequence, Vocabulary};

pub use bias::{apply_logit_bias, compose_logit_bias, logit_bias_terms, raw_logit_bias_terms, LogitBias, BIAS_LIMIT, SCORE_FLOOR};
pub use kcts::{kcts_decode, mcts_evaluate, mcts_expand, prefix_constrained_decode, Kcts};
pub use oracle::{brute_force_optimal, sequence_objective, BRUTE_FORCE_LIMIT};
pub use tree::{puct_score, InvariantViolation, NodeId, SearchNode, SearchTree};
pub use weighted::{nado_weighted_sample, nucleus_decode, weighted_decode, WeightedMode};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DecodeError {
    #[error("invalid decode config: {0}")]
    InvalidConfig(String),
    #[error("knowledge document is empty")]
    EmptyKnowledge,
    #[error("cannot expand a terminal node")]
    TerminalExpansion,
    #[error("search space of {0} sequences exceeds the brute-force limit")]
    SearchSpaceTooLarge(f64),
    #[error(transparent)]
    Lm(#[from] LmError),
}

/// Decoding hyperparameters. Field names are the config-file keys.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecodeConfig {
    pub c_puct: f64,
    pub num_simulations: usize,
    /// Children per expansion and top-k for every decoder. Values above the
    /// vocabulary size cover the whole vocabulary.
    pub search_width: usize,
    pub top_p: f64,
    pub temperature: f64,
    /// Applied to tree-search expansion priors only.
    pub repetition_penalty: f64,
    pub nado_alpha: f64,
    pub max_new_tokens: usize,
    pub constrained_prefix_len: Option<usize>,
    pub seed: u64,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            c_puct: 3.0,
            num_simulations: 50,
            search_width: 50,
            top_p: 0.95,
            temperature: 1.0,
            repetition_penalty: 1.2,
            nado_alpha: 0.25,
            max_new_tokens: 32,
            constrained_prefix_len: None,
            seed: 0,
        }
    }
}

impl DecodeConfig {
    /// Summarization defaults: 64 new tokens.
    pub fn summarization() -> Self {
        Self { max_new_tokens: 64, ..Self::default() }
    }

    pub fn validate(&self) -> Result<(), DecodeError> {
        let bad = |m: String| Err(DecodeError::InvalidConfig(m));
        if !(self.c_puct >= 0.0) || !self.c_puct.is_finite() {
            return bad(format!("c_puct must be >= 0, got {}", self.c_puct));
        }
        if self.num_simulations == 0 {
            return bad("num_simulations must be >= 1".into());
        }
        if self.search_width == 0 {
            return bad("search_width must be >= 1".into());
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return bad(format!("top_p must lie in (0, 1], got {}", self.top_p));
        }
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return bad(format!("temperature must be > 0, got {}", self.temperature));
        }
        if !(self.repetition_penalty >= 1.0) || !self.repetition_penalty.is_finite() {
            return bad(format!("repetition_penalty must be >= 1, got {}", self.repetition_penalty));
        }
        if !(self.nado_alpha > 0.0) || !self.nado_alpha.is_finite() {
            return bad(format!("nado_alpha must be > 0, got {}", self.nado_alpha));
        }
        Ok(())
    }

    pub(crate) fn width(&self, vocab: &Vocabulary) -> usize {
        self.search_width.min(vocab.len())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecodeRequest {
    pub context: Vec<TokenId>,
    pub knowledge: Vec<TokenId>,
}

impl DecodeRequest {
    pub fn new(context: Vec<TokenId>, knowledge: Vec<TokenId>) -> Result<Self, DecodeError> {
        if knowledge.is_empty() {
            return Err(DecodeError::EmptyKnowledge);
        }
        Ok(Self { context, knowledge })
    }

    /// Conditioning sequence seen by the language model: context then knowledge.
    pub fn conditioning(&self) -> Vec<TokenId> {
        let mut c = self.context.clone();
        c.extend_from_slice(&self.knowledge);
        c
    }

    pub(crate) fn check(&self) -> Result<(), DecodeError> {
        if self.knowledge.is_empty() {
            return Err(DecodeError::EmptyKnowledge);
        }
        Ok(())
    }
}

/// Output of one decoding job. Counters cover the calls made while
/// choosing tokens; `final_groundedness` is scored separately.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecodeResult {
    pub tokens: TokenSequence,
    /// `f(y_<=t, k)` of each committed token, when the decoder computed it.
    pub per_step_scores: Vec<f64>,
    pub final_groundedness: Option<f64>,
    pub lm_forward_calls: usize,
    pub scorer_calls: usize,
    /// Tree-search simulations whose selected leaf was terminal (no expansion).
    pub terminal_evaluations: usize,
    /// Weighted-decoding steps where every candidate scored 0 and the LM argmax was used.
    pub fallback_steps: usize,
    /// Requests sent to a remote model.
    pub remote_calls: usize,
}

impl DecodeResult {
    pub(crate) fn finish<G: GroundednessScorer + ?Sized>(mut self, scorer: Option<&G>, knowledge: &[TokenId]) -> Self {
        self.final_groundedness = scorer.map(|s| s.score_sequence(self.tokens.content(), knowledge));
        self
    }
}

/// Tokens of `prefix` without a trailing EOS, as seen by scorers.
pub(crate) fn content(prefix: &[TokenId], eos: TokenId) -> &[TokenId] {
    match prefix.last() {
        Some(&t) if t == eos => &prefix[..prefix.len() - 1],
        _ => prefix,
    }
}
