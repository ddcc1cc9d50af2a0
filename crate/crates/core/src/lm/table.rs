use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{LanguageModel, LmError, LogitVector, TokenId, Vocabulary};

const FILE_TOLERANCE: f64 = 1e-6;

/// Explicit next-token distributions keyed by the last `order` tokens of
/// the prefix. Prefixes shorter than `order` use their whole content as the
/// key (the empty key is the start context). Unknown contexts fall back to
/// the uniform distribution, so the model is total.
#[derive(Clone, Debug)]
pub struct TableLm {
    vocab: Vocabulary,
    order: usize,
    table: HashMap<Vec<TokenId>, LogitVector>,
}

/// On-disk form: `{"vocab", "eos", "order", "table": {"ctx tokens": {"tok": p}}}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TableLmFile {
    pub vocab: Vec<String>,
    pub eos: String,
    pub order: usize,
    pub table: BTreeMap<String, BTreeMap<String, f64>>,
}

impl TableLm {
    pub fn new(vocab: Vocabulary, order: usize) -> Self {
        Self { vocab, order, table: HashMap::new() }
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn contexts(&self) -> impl Iterator<Item = &[TokenId]> {
        self.table.keys().map(Vec::as_slice)
    }

    /// Stores a dense distribution for `context`. Entries must be
    /// nonnegative and sum to 1 within `1e-6`; they are renormalized exactly.
    pub fn insert(&mut self, context: Vec<TokenId>, probs: Vec<f64>) -> Result<(), LmError> {
        let invalid = |reason: String| LmError::InvalidDistribution {
            context: self.vocab.decode(&context).join(" "),
            reason,
        };
        if context.len() > self.order {
            return Err(invalid(format!("context longer than order {}", self.order)));
        }
        if let Some(&t) = context.iter().find(|&&t| t >= self.vocab.len()) {
            return Err(LmError::TokenOutOfRange(t));
        }
        if context.contains(&self.vocab.eos()) {
            return Err(invalid("context contains EOS".into()));
        }
        if probs.len() != self.vocab.len() {
            return Err(LmError::LengthMismatch { got: probs.len(), expected: self.vocab.len() });
        }
        if probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(invalid("negative or non-finite probability".into()));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > FILE_TOLERANCE {
            return Err(invalid(format!("probabilities sum to {total}")));
        }
        let normalized: Vec<f64> = probs.iter().map(|p| p / total).collect();
        self.table.insert(context, LogitVector::from_probs(&normalized));
        Ok(())
    }

    /// Sparse variant of [`insert`](Self::insert) over token strings.
    pub fn insert_tokens(&mut self, context: &[&str], entries: &[(&str, f64)]) -> Result<(), LmError> {
        let ctx = self.vocab.encode(context)?;
        let mut probs = vec![0.0; self.vocab.len()];
        for (tok, p) in entries {
            let id = self.vocab.id(tok).ok_or_else(|| LmError::UnknownToken(tok.to_string()))?;
            probs[id] += p;
        }
        self.insert(ctx, probs)
    }

    /// Probability table entry for `context`, if stored.
    pub fn distribution(&self, context: &[TokenId]) -> Option<Vec<f64>> {
        self.table.get(context).map(|z| z.softmax())
    }

    fn context_key<'a>(&self, prefix: &'a [TokenId]) -> &'a [TokenId] {
        &prefix[prefix.len().saturating_sub(self.order)..]
    }

    pub fn from_file_repr(file: &TableLmFile) -> Result<Self, LmError> {
        let vocab = Vocabulary::new(file.vocab.iter().cloned(), &file.eos)?;
        let mut lm = Self::new(vocab, file.order);
        for (ctx, dist) in &file.table {
            let ctx_tokens: Vec<&str> = ctx.split_whitespace().collect();
            let entries: Vec<(&str, f64)> = dist.iter().map(|(t, p)| (t.as_str(), *p)).collect();
            lm.insert_tokens(&ctx_tokens, &entries)?;
        }
        Ok(lm)
    }

    pub fn to_file_repr(&self) -> TableLmFile {
        let mut table = BTreeMap::new();
        for (ctx, z) in &self.table {
            let probs = z.softmax();
            let dist = probs
                .iter()
                .enumerate()
                .filter(|(_, p)| **p > 0.0)
                .map(|(i, p)| (self.vocab.tokens()[i].clone(), *p))
                .collect();
            table.insert(self.vocab.decode(ctx).join(" "), dist);
        }
        TableLmFile {
            vocab: self.vocab.tokens().to_vec(),
            eos: self.vocab.tokens()[self.vocab.eos()].clone(),
            order: self.order,
            table,
        }
    }

    pub fn from_json(text: &str) -> Result<Self, LmError> {
        let file: TableLmFile =
            serde_json::from_str(text).map_err(|e| LmError::InvalidVocabulary(format!("bad table file: {e}")))?;
        Self::from_file_repr(&file)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.to_file_repr()).expect("table serializes")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, LmError> {
        let text = std::fs::read_to_string(path.as_ref())
            .map_err(|e| LmError::Backend(format!("{}: {e}", path.as_ref().display())))?;
        Self::from_json(&text)
    }
}

impl LanguageModel for TableLm {
    fn vocabulary(&self) -> &Vocabulary {
        &self.vocab
    }

    fn next_logits(&self, prefix: &[TokenId], _conditioning: &[TokenId]) -> Result<LogitVector, LmError> {
        Ok(match self.table.get(self.context_key(prefix)) {
            Some(z) => z.clone(),
            None => LogitVector::uniform(self.vocab.len()),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lm::{next_logprobs, sequence_logprob};

    fn bigram() -> TableLm {
        let vocab = Vocabulary::new(["A", "B", "C", "</s>"], "</s>").unwrap();
        let mut lm = TableLm::new(vocab, 1);
        lm.insert_tokens(&[], &[("A", 1.0)]).unwrap();
        lm.insert_tokens(&["A"], &[("B", 0.7), ("</s>", 0.3)]).unwrap();
        lm
    }

    #[test]
    fn uniform_fallback() {
        let lm = bigram();
        let z = next_logprobs(&lm, &[2], &[]).unwrap();
        for v in z.values() {
            assert!((v - 0.25f64.ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn bigram_lookup() {
        let lm = bigram();
        let z = next_logprobs(&lm, &[0], &[]).unwrap();
        assert!((z[1] - 0.7f64.ln()).abs() < 1e-12);
        assert!((z[3] - 0.3f64.ln()).abs() < 1e-12);
        assert_eq!(z[0], f64::NEG_INFINITY);
        assert_eq!(z[2], f64::NEG_INFINITY);
        assert_eq!(z, next_logprobs(&lm, &[0], &[]).unwrap());
        assert!(z.log_sum_exp().abs() < 1e-9);
    }

    #[test]
    fn terminated_prefix_rejected() {
        let lm = bigram();
        assert_eq!(next_logprobs(&lm, &[0, 3], &[]), Err(LmError::TerminatedPrefix));
    }

    #[test]
    fn sequence_logprob_examples() {
        let lm = bigram();
        let v = Vocabulary::new(["a", "b", "c", "</s>"], "</s>").unwrap();
        let uniform = TableLm::new(v, 1);
        assert!((sequence_logprob(&uniform, &[1], &[]).unwrap() - 0.25f64.ln()).abs() < 1e-12);
        let lp = sequence_logprob(&lm, &[0, 3], &[]).unwrap();
        assert!((lp - (1.0f64.ln() + 0.3f64.ln())).abs() < 1e-12);
        let whole = sequence_logprob(&lm, &[0, 1], &[]).unwrap();
        let head = sequence_logprob(&lm, &[0], &[]).unwrap();
        let tail = next_logprobs(&lm, &[0], &[]).unwrap()[1];
        assert!((whole - (head + tail)).abs() < 1e-12);
        assert_eq!(sequence_logprob(&lm, &[1], &[]).unwrap(), f64::NEG_INFINITY);
    }

    #[test]
    fn rejects_bad_distributions() {
        let mut lm = bigram();
        assert!(lm.insert_tokens(&["B"], &[("A", 0.5)]).is_err());
        assert!(lm.insert_tokens(&["B"], &[("A", 1.5), ("C", -0.5)]).is_err());
        assert!(lm.insert_tokens(&["A", "B"], &[("A", 1.0)]).is_err());
        assert!(lm.insert_tokens(&["zz"], &[("A", 1.0)]).is_err());
    }

    #[test]
    fn json_round_trip() {
        let lm = bigram();
        let json = lm.to_json();
        let back = TableLm::from_json(&json).unwrap();
        for prefix in [&[][..], &[0][..], &[2][..]] {
            assert_eq!(back.next_logits(prefix, &[]).unwrap(), lm.next_logits(prefix, &[]).unwrap());
        }
    }

    #[test]
    fn parses_documented_format() {
        let text = r#"{"vocab": ["A", "B", "</s>"], "eos": "</s>", "order": 1,
            "table": {"": {"A": 0.5, "B": 0.5}, "A": {"B": 0.6, "</s>": 0.4000001}}}"#;
        let lm = TableLm::from_json(text).unwrap();
        let p = lm.distribution(&[0]).unwrap();
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let bad = r#"{"vocab": ["A", "</s>"], "eos": "</s>", "order": 1, "table": {"": {"A": 0.9}}}"#;
        assert!(TableLm::from_json(bad).is_err());
    }
}
