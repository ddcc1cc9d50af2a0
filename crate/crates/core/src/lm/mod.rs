//! Language-model contract, logit transforms, and deterministic toy models.
//!
//! Tokens are opaque indices into a [`Vocabulary`]. A [`LanguageModel`]
//! maps a generated prefix plus a conditioning sequence (task input and
//! knowledge) to next-token scores in the log domain.

mod logits;
mod mixture;
mod table;
pub mod transforms;

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use logits::LogitVector;
pub use mixture::CopyMixLm;
pub use table::{TableLm, TableLmFile};
pub use transforms::{
    apply_temperature, repetition_penalty, sample_token, top_k_filter, top_p_filter,
    SamplingParams,
};

pub type TokenId = usize;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LmError {
    #[error("prefix already ends in EOS")]
    TerminatedPrefix,
    #[error("invalid temperature {0}; must be > 0")]
    InvalidTemperature(f64),
    #[error("invalid top-k {k} for vocabulary of size {vocab}")]
    InvalidK { k: usize, vocab: usize },
    #[error("invalid top-p {0}; must lie in (0, 1]")]
    InvalidP(f64),
    #[error("invalid repetition penalty {0}; must be >= 1")]
    InvalidPenalty(f64),
    #[error("every logit is masked")]
    AllMasked,
    #[error("invalid vocabulary: {0}")]
    InvalidVocabulary(String),
    #[error("unknown token {0:?}")]
    UnknownToken(String),
    #[error("token id {0} out of range")]
    TokenOutOfRange(TokenId),
    #[error("EOS may only appear as the final token")]
    MisplacedEos,
    #[error("invalid distribution for context {context:?}: {reason}")]
    InvalidDistribution { context: String, reason: String },
    #[error("logit vector has length {got}, expected {expected}")]
    LengthMismatch { got: usize, expected: usize },
    #[error("language model backend failed: {0}")]
    Backend(String),
}

/// Ordered token strings with a distinguished end-of-sequence token.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
    eos: TokenId,
}

impl Vocabulary {
    pub fn new<I, T>(tokens: I, eos: &str) -> Result<Self, LmError>
    where
        I: IntoIterator<Item = T>,
        T: Into<String>,
    {
        let tokens: Vec<String> = tokens.into_iter().map(Into::into).collect();
        if tokens.len() < 2 {
            return Err(LmError::InvalidVocabulary(format!(
                "need at least 2 tokens, got {}",
                tokens.len()
            )));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(LmError::InvalidVocabulary(format!("duplicate token {t:?}")));
            }
        }
        let eos = *index
            .get(eos)
            .ok_or_else(|| LmError::InvalidVocabulary(format!("eos token {eos:?} not in vocabulary")))?;
        Ok(Self { tokens, index, eos })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn eos(&self) -> TokenId {
        self.eos
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> Result<Vec<TokenId>, LmError> {
        tokens
            .iter()
            .map(|t| self.id(t.as_ref()).ok_or_else(|| LmError::UnknownToken(t.as_ref().to_string())))
            .collect()
    }

    /// Token strings for `ids`; out-of-range ids render as `<unk:N>`.
    pub fn decode(&self, ids: &[TokenId]) -> Vec<String> {
        ids.iter()
            .map(|&i| self.token(i).map(str::to_string).unwrap_or_else(|| format!("<unk:{i}>")))
            .collect()
    }

    /// Space-joined text of `ids` with any EOS dropped.
    pub fn detokenize(&self, ids: &[TokenId]) -> String {
        let words: Vec<&str> = ids
            .iter()
            .filter(|&&i| i != self.eos)
            .filter_map(|&i| self.token(i))
            .collect();
        words.join(" ")
    }
}

/// A generated token sequence. EOS, when present, is the last id.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TokenSequence {
    ids: Vec<TokenId>,
    terminated: bool,
}

impl TokenSequence {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_ids(ids: Vec<TokenId>, eos: TokenId) -> Result<Self, LmError> {
        let terminated = match ids.iter().position(|&t| t == eos) {
            None => false,
            Some(p) if p + 1 == ids.len() => true,
            Some(_) => return Err(LmError::MisplacedEos),
        };
        Ok(Self { ids, terminated })
    }

    pub fn push(&mut self, id: TokenId, eos: TokenId) -> Result<(), LmError> {
        if self.terminated {
            return Err(LmError::TerminatedPrefix);
        }
        self.ids.push(id);
        self.terminated = id == eos;
        Ok(())
    }

    pub fn ids(&self) -> &[TokenId] {
        &self.ids
    }

    pub fn into_ids(self) -> Vec<TokenId> {
        self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn is_terminated(&self) -> bool {
        self.terminated
    }

    /// Ids without the trailing EOS.
    pub fn content(&self) -> &[TokenId] {
        if self.terminated {
            &self.ids[..self.ids.len() - 1]
        } else {
            &self.ids
        }
    }
}

/// Next-token scoring contract. Implementations must be deterministic and
/// immutable once built, so they can be shared across decoding jobs.
pub trait LanguageModel: Send + Sync {
    fn vocabulary(&self) -> &Vocabulary;

    /// Unnormalized log-domain scores for the token following `prefix`.
    fn next_logits(&self, prefix: &[TokenId], conditioning: &[TokenId]) -> Result<LogitVector, LmError>;
}

impl<M: LanguageModel + ?Sized> LanguageModel for &M {
    fn vocabulary(&self) -> &Vocabulary {
        (**self).vocabulary()
    }

    fn next_logits(&self, prefix: &[TokenId], conditioning: &[TokenId]) -> Result<LogitVector, LmError> {
        (**self).next_logits(prefix, conditioning)
    }
}

impl<M: LanguageModel + ?Sized> LanguageModel for std::sync::Arc<M> {
    fn vocabulary(&self) -> &Vocabulary {
        (**self).vocabulary()
    }

    fn next_logits(&self, prefix: &[TokenId], conditioning: &[TokenId]) -> Result<LogitVector, LmError> {
        (**self).next_logits(prefix, conditioning)
    }
}

impl<M: LanguageModel + ?Sized> LanguageModel for Box<M> {
    fn vocabulary(&self) -> &Vocabulary {
        (**self).vocabulary()
    }

    fn next_logits(&self, prefix: &[TokenId], conditioning: &[TokenId]) -> Result<LogitVector, LmError> {
        (**self).next_logits(prefix, conditioning)
    }
}

/// Log-normalized next-token distribution `log P(y_t | prefix, conditioning)`.
pub fn next_logprobs<M: LanguageModel + ?Sized>(
    lm: &M,
    prefix: &[TokenId],
    conditioning: &[TokenId],
) -> Result<LogitVector, LmError> {
    let eos = lm.vocabulary().eos();
    if prefix.last() == Some(&eos) {
        return Err(LmError::TerminatedPrefix);
    }
    let logits = lm.next_logits(prefix, conditioning)?;
    let expected = lm.vocabulary().len();
    if logits.len() != expected {
        return Err(LmError::LengthMismatch { got: logits.len(), expected });
    }
    if logits.is_all_masked() {
        return Err(LmError::AllMasked);
    }
    Ok(logits.log_softmax())
}

/// `sum_t log P(y_t | y_<t, conditioning)`; `-inf` when any token is masked.
pub fn sequence_logprob<M: LanguageModel + ?Sized>(
    lm: &M,
    y: &[TokenId],
    conditioning: &[TokenId],
) -> Result<f64, LmError> {
    let mut total = 0.0;
    for t in 0..y.len() {
        let lp = next_logprobs(lm, &y[..t], conditioning)?;
        let v = lp.get(y[t]).ok_or(LmError::TokenOutOfRange(y[t]))?;
        total += v;
    }
    Ok(total)
}
