//! Knowledge-constrained tree search: MCTS over next tokens whose leaf
//! values are prefix groundedness scores.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::tree::{NodeId, SearchTree};
use super::weighted::nucleus_continue;
use super::{content, DecodeConfig, DecodeError, DecodeRequest, DecodeResult};
use crate::grounding::GroundednessScorer;
use crate::lm::{next_logprobs, repetition_penalty, LanguageModel, LmError, TokenId, TokenSequence};

/// Expands `leaf` with the top `search_width` tokens of the
/// repetition-penalized next-token distribution after `prefix` (the
/// generated tokens through `leaf`). Priors are renormalized over the kept
/// tokens.
pub fn mcts_expand<M: LanguageModel + ?Sized>(
    tree: &mut SearchTree,
    leaf: NodeId,
    lm: &M,
    prefix: &[TokenId],
    conditioning: &[TokenId],
    cfg: &DecodeConfig,
) -> Result<(), DecodeError> {
    if tree.node(leaf).terminal {
        return Err(DecodeError::TerminalExpansion);
    }
    let vocab = lm.vocabulary();
    let logprobs = next_logprobs(lm, prefix, conditioning)?;
    let penalized = repetition_penalty(&logprobs, prefix, cfg.repetition_penalty)?.log_softmax();
    let kept: Vec<TokenId> = penalized.ranked().into_iter().take(cfg.width(vocab)).collect();
    if kept.is_empty() {
        return Err(LmError::AllMasked.into());
    }
    let mass: f64 = kept.iter().map(|&t| penalized[t].exp()).sum();
    let children: Vec<(TokenId, f64)> = kept.iter().map(|&t| (t, penalized[t].exp() / mass)).collect();
    tree.expand(leaf, &children, vocab.eos(), cfg.max_new_tokens)
}

/// `f(y_<=leaf, k)` from the scorer, clamped to `[0, 1]`; EOS is not scored.
pub fn mcts_evaluate<G: GroundednessScorer + ?Sized>(
    scorer: &G,
    prefix: &[TokenId],
    request: &DecodeRequest,
    eos: TokenId,
) -> f64 {
    let v = scorer.score_prefix(content(prefix, eos), &request.knowledge);
    if v.is_nan() {
        0.0
    } else {
        v.clamp(0.0, 1.0)
    }
}

/// One decoding job's search state. Exposed so callers can step the search
/// and inspect the tree between simulations.
pub struct Kcts<'a, M: ?Sized, G: ?Sized> {
    lm: &'a M,
    scorer: &'a G,
    request: &'a DecodeRequest,
    cfg: &'a DecodeConfig,
    conditioning: Vec<TokenId>,
    tree: SearchTree,
    generated: Vec<TokenId>,
    result: DecodeResult,
}

impl<'a, M: LanguageModel + ?Sized, G: GroundednessScorer + ?Sized> Kcts<'a, M, G> {
    pub fn new(lm: &'a M, scorer: &'a G, request: &'a DecodeRequest, cfg: &'a DecodeConfig) -> Result<Self, DecodeError> {
        cfg.validate()?;
        request.check()?;
        Ok(Self {
            lm,
            scorer,
            request,
            cfg,
            conditioning: request.conditioning(),
            tree: SearchTree::new(0, cfg.max_new_tokens == 0),
            generated: Vec::new(),
            result: DecodeResult::default(),
        })
    }

    pub fn tree(&self) -> &SearchTree {
        &self.tree
    }

    pub fn generated(&self) -> &[TokenId] {
        &self.generated
    }

    pub fn result(&self) -> &DecodeResult {
        &self.result
    }

    /// True once EOS was committed or `max_new_tokens` reached.
    pub fn is_done(&self) -> bool {
        self.generated.last() == Some(&self.lm.vocabulary().eos()) || self.generated.len() >= self.cfg.max_new_tokens
    }

    /// One select, expand, evaluate, backpropagate cycle.
    pub fn simulate(&mut self) -> Result<(), DecodeError> {
        let leaf = self.tree.select(self.cfg.c_puct);
        let mut prefix = self.generated.clone();
        prefix.extend(self.tree.path_tokens(leaf));
        if self.tree.node(leaf).terminal {
            self.result.terminal_evaluations += 1;
        } else {
            mcts_expand(&mut self.tree, leaf, self.lm, &prefix, &self.conditioning, self.cfg)?;
            self.result.lm_forward_calls += 1;
        }
        let value = mcts_evaluate(self.scorer, &prefix, self.request, self.lm.vocabulary().eos());
        self.result.scorer_calls += 1;
        self.tree.backpropagate(leaf, value);
        Ok(())
    }

    /// Commits the most visited root child and makes it the new root.
    pub fn commit(&mut self) -> Option<TokenId> {
        let child = self.tree.best_child()?;
        let node = self.tree.node(child);
        let token = node.token.expect("child has a token");
        if let Some(v) = node.own_value {
            self.result.per_step_scores.push(v);
        }
        self.generated.push(token);
        self.tree.commit(child);
        Some(token)
    }

    /// Runs `num_simulations` simulations and commits one token.
    pub fn step(&mut self) -> Result<TokenId, DecodeError> {
        for _ in 0..self.cfg.num_simulations {
            self.simulate()?;
        }
        Ok(self.commit().expect("root is expanded after a simulation"))
    }

    /// Steps until done or `limit` tokens have been generated.
    pub fn run(&mut self, limit: usize) -> Result<(), DecodeError> {
        while !self.is_done() && self.generated.len() < limit {
            self.step()?;
        }
        Ok(())
    }

    fn into_parts(self) -> (Vec<TokenId>, DecodeResult) {
        (self.generated, self.result)
    }
}

/// Tree-search decoding: per token, `num_simulations` simulations followed
/// by committing the most visited root child, reusing its subtree.
pub fn kcts_decode<M, G>(lm: &M, scorer: &G, request: &DecodeRequest, cfg: &DecodeConfig) -> Result<DecodeResult, DecodeError>
where
    M: LanguageModel + ?Sized,
    G: GroundednessScorer + ?Sized,
{
    let mut search = Kcts::new(lm, scorer, request, cfg)?;
    search.run(cfg.max_new_tokens)?;
    let (generated, mut result) = search.into_parts();
    result.tokens = TokenSequence::from_ids(generated, lm.vocabulary().eos())?;
    Ok(result.finish(Some(scorer), &request.knowledge))
}

/// Tree search for the first `constrained_prefix_len` tokens, then nucleus
/// sampling for the rest.
pub fn prefix_constrained_decode<M, G>(
    lm: &M,
    scorer: &G,
    request: &DecodeRequest,
    cfg: &DecodeConfig,
) -> Result<DecodeResult, DecodeError>
where
    M: LanguageModel + ?Sized,
    G: GroundednessScorer + ?Sized,
{
    let t = cfg
        .constrained_prefix_len
        .ok_or_else(|| DecodeError::InvalidConfig("constrained_prefix_len is required".into()))?;
    let mut search = Kcts::new(lm, scorer, request, cfg)?;
    search.run(t)?;
    let (mut generated, mut result) = search.into_parts();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    nucleus_continue(lm, request, cfg, &mut generated, &mut result, &mut rng)?;
    result.tokens = TokenSequence::from_ids(generated, lm.vocabulary().eos())?;
    Ok(result.finish(Some(scorer), &request.knowledge))
}
