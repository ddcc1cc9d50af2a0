//! Groundedness scoring, synthetic negative data, and token-level labeling.
//!
//! A scorer estimates `f(y, k)`, the probability that a response `y` is
//! supported by knowledge `k`, and its prefix form `f(y_<t, k)`, the
//! expected groundedness of any completion of the prefix.

mod classifier;
mod synth;

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lm::{LmError, TokenId};

pub use classifier::{
    evaluate_classifier, train_token_classifier, ClassifierConfig, ClassifierReport, HeadKind, SchemeAccuracy,
    TokenClassifier,
};
pub use synth::{
    build_synthetic_dataset, make_knowledge_shuffle, make_partial_hallucination, relabel, token_level_labels,
    truncation_labels, DataGenConfig,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GroundingError {
    #[error("knowledge pool needs at least 2 distinct documents")]
    PoolTooSmall,
    #[error("response of length {0} is too short; need at least 3 tokens")]
    ResponseTooShort(usize),
    #[error("corpus needs at least 2 examples, got {0}")]
    CorpusTooSmall(usize),
    #[error("dataset contains a single label class")]
    DegenerateDataset,
    #[error("empty {0}")]
    Empty(&'static str),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Lm(#[from] LmError),
}

/// One `(x, k, y)` triple.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroundedExample {
    pub id: String,
    pub context: Vec<TokenId>,
    pub knowledge: Vec<TokenId>,
    pub response: Vec<TokenId>,
}

impl GroundedExample {
    pub fn new(
        id: impl Into<String>,
        context: Vec<TokenId>,
        knowledge: Vec<TokenId>,
        response: Vec<TokenId>,
    ) -> Result<Self, GroundingError> {
        if knowledge.is_empty() {
            return Err(GroundingError::Empty("knowledge"));
        }
        if response.is_empty() {
            return Err(GroundingError::Empty("response"));
        }
        Ok(Self { id: id.into(), context, knowledge, response })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelScheme {
    /// Labels are 1 up to the first hallucinated token and 0 from it on.
    Ripa,
    /// Response randomly truncated; one sequence label for the kept tokens.
    Truncation,
    /// Every token carries the sequence label.
    TokenLevel,
    /// Unmodified grounded response, all labels 1.
    Positive,
}

impl LabelScheme {
    pub fn as_str(self) -> &'static str {
        match self {
            LabelScheme::Ripa => "ripa",
            LabelScheme::Truncation => "truncation",
            LabelScheme::TokenLevel => "token_level",
            LabelScheme::Positive => "positive",
        }
    }
}

impl fmt::Display for LabelScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for LabelScheme {
    type Err = GroundingError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "ripa" => Ok(Self::Ripa),
            "truncation" => Ok(Self::Truncation),
            "token_level" | "token-level" => Ok(Self::TokenLevel),
            "positive" => Ok(Self::Positive),
            other => Err(GroundingError::InvalidConfig(format!("unknown label scheme {other:?}"))),
        }
    }
}

/// Response tokens with per-token groundedness labels.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledExample {
    pub base: GroundedExample,
    pub labels: Vec<u8>,
    /// Index of the first 0 label for RIPA negatives.
    pub inflection: Option<usize>,
    pub scheme: LabelScheme,
}

impl LabeledExample {
    pub fn positive(base: GroundedExample) -> Self {
        let labels = vec![1; base.response.len()];
        Self { base, labels, inflection: None, scheme: LabelScheme::Positive }
    }

    /// 1 when every token is grounded.
    pub fn sequence_label(&self) -> u8 {
        u8::from(self.labels.iter().all(|&l| l == 1))
    }

    /// Checks the label invariants for this example's scheme.
    pub fn validate(&self) -> Result<(), String> {
        if self.labels.len() != self.base.response.len() {
            return Err(format!(
                "{} labels for {} response tokens",
                self.labels.len(),
                self.base.response.len()
            ));
        }
        if self.labels.iter().any(|&l| l > 1) {
            return Err("labels must be 0 or 1".into());
        }
        match self.scheme {
            LabelScheme::Positive if self.labels.contains(&0) => {
                Err("positive example with a 0 label".into())
            }
            LabelScheme::Ripa => {
                if let Some(i) = self.inflection {
                    if self.labels.iter().enumerate().any(|(t, &l)| (t < i) != (l == 1)) {
                        return Err(format!("labels do not switch to 0 at inflection {i}"));
                    }
                }
                if self.labels.windows(2).any(|w| w[1] > w[0]) {
                    return Err("RIPA labels must be non-increasing".into());
                }
                Ok(())
            }
            LabelScheme::Truncation | LabelScheme::TokenLevel
                if self.labels.windows(2).any(|w| w[0] != w[1]) =>
            {
                Err(format!("{} labels must be uniform", self.scheme))
            }
            _ => Ok(()),
        }
    }
}

/// `f(y, k)` and its prefix approximation. Outputs lie in `[0, 1]`.
pub trait GroundednessScorer: Send + Sync {
    /// Expected groundedness of any completion of `prefix`. The empty
    /// prefix is neutral.
    fn score_prefix(&self, prefix: &[TokenId], knowledge: &[TokenId]) -> f64;

    fn score_sequence(&self, response: &[TokenId], knowledge: &[TokenId]) -> f64 {
        self.score_prefix(response, knowledge)
    }
}

impl<G: GroundednessScorer + ?Sized> GroundednessScorer for &G {
    fn score_prefix(&self, prefix: &[TokenId], knowledge: &[TokenId]) -> f64 {
        (**self).score_prefix(prefix, knowledge)
    }

    fn score_sequence(&self, response: &[TokenId], knowledge: &[TokenId]) -> f64 {
        (**self).score_sequence(response, knowledge)
    }
}

impl<G: GroundednessScorer + ?Sized> GroundednessScorer for Box<G> {
    fn score_prefix(&self, prefix: &[TokenId], knowledge: &[TokenId]) -> f64 {
        (**self).score_prefix(prefix, knowledge)
    }

    fn score_sequence(&self, response: &[TokenId], knowledge: &[TokenId]) -> f64 {
        (**self).score_sequence(response, knowledge)
    }
}

impl<G: GroundednessScorer + ?Sized> GroundednessScorer for std::sync::Arc<G> {
    fn score_prefix(&self, prefix: &[TokenId], knowledge: &[TokenId]) -> f64 {
        (**self).score_prefix(prefix, knowledge)
    }

    fn score_sequence(&self, response: &[TokenId], knowledge: &[TokenId]) -> f64 {
        (**self).score_sequence(response, knowledge)
    }
}

/// Distinct-token precision of `y` against `k`; 1 for an empty `y`.
pub fn lexical_groundedness(y: &[TokenId], k: &[TokenId]) -> f64 {
    let distinct: HashSet<TokenId> = y.iter().copied().collect();
    if distinct.is_empty() {
        return 1.0;
    }
    let knowledge: HashSet<TokenId> = k.iter().copied().collect();
    let shared = distinct.iter().filter(|t| knowledge.contains(t)).count();
    shared as f64 / distinct.len() as f64
}

/// Deterministic oracle scorer based on [`lexical_groundedness`].
#[derive(Clone, Copy, Debug, Default)]
pub struct LexicalScorer;

impl GroundednessScorer for LexicalScorer {
    fn score_prefix(&self, prefix: &[TokenId], knowledge: &[TokenId]) -> f64 {
        lexical_groundedness(prefix, knowledge)
    }
}

/// Returns the same score everywhere.
#[derive(Clone, Copy, Debug)]
pub struct ConstantScorer(pub f64);

impl GroundednessScorer for ConstantScorer {
    fn score_prefix(&self, _prefix: &[TokenId], _knowledge: &[TokenId]) -> f64 {
        self.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn lexical_examples() {
        assert_eq!(lexical_groundedness(&[1, 2, 3], &[1, 2, 3]), 1.0);
        assert_eq!(lexical_groundedness(&[0, 1], &[1, 2]), 0.5);
        assert_eq!(lexical_groundedness(&[0, 0, 1, 1], &[1, 2]), 0.5);
        assert_eq!(lexical_groundedness(&[4, 5], &[1, 2]), 0.0);
        assert_eq!(lexical_groundedness(&[], &[1, 2]), 1.0);
    }

    #[test]
    fn example_requires_knowledge_and_response() {
        assert!(GroundedExample::new("a", vec![], vec![], vec![1]).is_err());
        assert!(GroundedExample::new("a", vec![], vec![1], vec![]).is_err());
        assert!(GroundedExample::new("a", vec![], vec![1], vec![1]).is_ok());
    }

    #[test]
    fn validate_catches_bad_ripa() {
        let base = GroundedExample::new("a", vec![], vec![1], vec![1, 2, 3]).unwrap();
        let mut ex = LabeledExample { base, labels: vec![1, 0, 1], inflection: None, scheme: LabelScheme::Ripa };
        assert!(ex.validate().is_err());
        ex.labels = vec![1, 1, 0];
        ex.inflection = Some(2);
        assert!(ex.validate().is_ok());
        ex.inflection = Some(1);
        assert!(ex.validate().is_err());
    }

    #[test]
    fn scheme_names_round_trip() {
        for s in [LabelScheme::Ripa, LabelScheme::Truncation, LabelScheme::TokenLevel, LabelScheme::Positive] {
            assert_eq!(s.as_str().parse::<LabelScheme>().unwrap(), s);
        }
    }

    proptest! {
        #[test]
        fn lexical_in_unit_interval(y in prop::collection::vec(0usize..10, 0..12), k in prop::collection::vec(0usize..10, 0..12)) {
            let f = lexical_groundedness(&y, &k);
            prop_assert!((0.0..=1.0).contains(&f));
        }
    }
}
