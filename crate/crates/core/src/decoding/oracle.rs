//! Exhaustive maximizer of the sequence objective `log P(y | x) + log f(y, k)`.

use super::{content, DecodeError, DecodeRequest};
use crate::grounding::GroundednessScorer;
use crate::lm::{next_logprobs, sequence_logprob, LanguageModel, TokenId, TokenSequence};

/// Largest `|V|^max_len` the brute-force search accepts.
pub const BRUTE_FORCE_LIMIT: f64 = 1e7;

/// `log P(y | x, k) + ln f(y, k)`, with `f` scored on `y` without EOS.
pub fn sequence_objective<M, G>(lm: &M, scorer: &G, request: &DecodeRequest, y: &[TokenId]) -> Result<f64, DecodeError>
where
    M: LanguageModel + ?Sized,
    G: GroundednessScorer + ?Sized,
{
    let lp = sequence_logprob(lm, y, &request.conditioning())?;
    let f = scorer.score_sequence(content(y, lm.vocabulary().eos()), &request.knowledge);
    Ok(lp + f.ln())
}

/// Enumerates every EOS-terminated sequence of at most `max_len` tokens
/// (EOS included) and returns the best one with its objective. Earlier
/// sequences in depth-first, ascending-token order win ties.
pub fn brute_force_optimal<M, G>(
    lm: &M,
    scorer: &G,
    request: &DecodeRequest,
    max_len: usize,
) -> Result<(TokenSequence, f64), DecodeError>
where
    M: LanguageModel + ?Sized,
    G: GroundednessScorer + ?Sized,
{
    request.check()?;
    let vocab = lm.vocabulary().len() as f64;
    let space = vocab.powi(max_len as i32);
    if space > BRUTE_FORCE_LIMIT {
        return Err(DecodeError::SearchSpaceTooLarge(space));
    }
    let mut search = Search {
        lm,
        scorer,
        request,
        conditioning: request.conditioning(),
        eos: lm.vocabulary().eos(),
        max_len,
        best: None,
    };
    let mut prefix = Vec::with_capacity(max_len);
    search.visit(&mut prefix, 0.0)?;
    let (ids, objective) = search.best.unwrap_or((Vec::new(), f64::NEG_INFINITY));
    let seq = TokenSequence::from_ids(ids, search.eos)?;
    Ok((seq, objective))
}

struct Search<'a, M: ?Sized, G: ?Sized> {
    lm: &'a M,
    scorer: &'a G,
    request: &'a DecodeRequest,
    conditioning: Vec<TokenId>,
    eos: TokenId,
    max_len: usize,
    best: Option<(Vec<TokenId>, f64)>,
}

impl<M: LanguageModel + ?Sized, G: GroundednessScorer + ?Sized> Search<'_, M, G> {
    fn visit(&mut self, prefix: &mut Vec<TokenId>, logprob: f64) -> Result<(), DecodeError> {
        if prefix.len() == self.max_len {
            return Ok(());
        }
        let lp = next_logprobs(self.lm, prefix, &self.conditioning)?;
        for t in lp.unmasked().collect::<Vec<_>>() {
            let total = logprob + lp[t];
            if t == self.eos {
                let f = self.scorer.score_sequence(prefix, &self.request.knowledge);
                let objective = total + f.ln();
                if self.best.as_ref().is_none_or(|(_, b)| objective > *b) {
                    let mut ids = prefix.clone();
                    ids.push(t);
                    self.best = Some((ids, objective));
                }
            } else {
                prefix.push(t);
                self.visit(prefix, total)?;
                prefix.pop();
            }
        }
        Ok(())
    }
}
