//! Knowledge-overlap (KF1, K-Copy) and token-overlap (F1, BLEU-4, Rouge-L)
//! metrics, plus batch evaluation into a [`MetricReport`].

use std::collections::{BTreeMap, HashMap};
use std::hash::Hash;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::decoding::DecodeResult;
use crate::grounding::{GroundedExample, GroundednessScorer};
use crate::lm::Vocabulary;

/// Report columns, in output order.
pub const METRIC_COLUMNS: [&str; 6] = ["KF1", "K-Copy", "F1", "BLEU", "RougeL", "f"];

const BLEU_EPSILON: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricError {
    #[error("both strings are empty")]
    BothEmpty,
    #[error("empty input")]
    EmptyInput,
    #[error("no results to evaluate")]
    NoResults,
    #[error("result {index} has id {got:?} but the dataset has {expected:?}")]
    IdMismatch { index: usize, got: String, expected: String },
}

/// Character-level edit distance with unit costs.
pub fn levenshtein(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    let mut row: Vec<usize> = (0..=b.len()).collect();
    for (i, ca) in a.iter().enumerate() {
        let mut diag = row[0];
        row[0] = i + 1;
        for (j, cb) in b.iter().enumerate() {
            let next = (diag + usize::from(ca != cb)).min(row[j] + 1).min(row[j + 1] + 1);
            diag = row[j + 1];
            row[j + 1] = next;
        }
    }
    row[b.len()]
}

/// `1 - LD(y, k) / max(|y|, |k|)` over characters.
pub fn k_copy(y: &str, k: &str) -> Result<f64, MetricError> {
    let longest = y.chars().count().max(k.chars().count());
    if longest == 0 {
        return Err(MetricError::BothEmpty);
    }
    Ok(1.0 - levenshtein(y, k) as f64 / longest as f64)
}

fn counts<T: Hash + Eq>(xs: &[T]) -> HashMap<&T, usize> {
    let mut m = HashMap::new();
    for x in xs {
        *m.entry(x).or_insert(0) += 1;
    }
    m
}

fn overlap_f1<T: Hash + Eq>(y: &[T], r: &[T]) -> Result<f64, MetricError> {
    if y.is_empty() || r.is_empty() {
        return Err(MetricError::EmptyInput);
    }
    let cr = counts(r);
    let shared: usize = counts(y).iter().map(|(t, &n)| n.min(cr.get(t).copied().unwrap_or(0))).sum();
    if shared == 0 {
        return Ok(0.0);
    }
    let p = shared as f64 / y.len() as f64;
    let rc = shared as f64 / r.len() as f64;
    Ok(2.0 * p * rc / (p + rc))
}

/// Unigram F1 between a response and the knowledge, with clipped
/// (multiset) overlap.
pub fn knowledge_f1<T: Hash + Eq>(y: &[T], k: &[T]) -> Result<f64, MetricError> {
    overlap_f1(y, k)
}

/// Unigram F1 against the reference response.
pub fn token_f1<T: Hash + Eq>(y: &[T], reference: &[T]) -> Result<f64, MetricError> {
    overlap_f1(y, reference)
}

/// Sentence BLEU-4: geometric mean of clipped 1- to 4-gram precisions
/// times the brevity penalty. Zero match counts are replaced by `1e-9`.
pub fn bleu4<T: Hash + Eq>(y: &[T], reference: &[T]) -> f64 {
    if y.is_empty() {
        return 0.0;
    }
    let mut log_sum = 0.0;
    for n in 1..=4 {
        let ref_grams = counts(&reference.windows(n).collect::<Vec<_>>())
            .into_iter()
            .map(|(g, c)| (*g, c))
            .collect::<HashMap<_, _>>();
        let cand: Vec<&[T]> = y.windows(n).collect();
        let matched: usize = counts(&cand)
            .iter()
            .map(|(g, &c)| c.min(ref_grams.get(*g).copied().unwrap_or(0)))
            .sum();
        let total = cand.len().max(1) as f64;
        let m = if matched == 0 { BLEU_EPSILON } else { matched as f64 };
        log_sum += (m / total).ln();
    }
    let (c, r) = (y.len() as f64, reference.len() as f64);
    let bp = if c > r { 1.0 } else { (1.0 - r / c).exp() };
    bp * (log_sum / 4.0).exp()
}

fn lcs_len<T: Eq>(a: &[T], b: &[T]) -> usize {
    let mut row = vec![0usize; b.len() + 1];
    for x in a {
        let mut diag = 0;
        for (j, y) in b.iter().enumerate() {
            let next = if x == y { diag + 1 } else { row[j + 1].max(row[j]) };
            diag = row[j + 1];
            row[j + 1] = next;
        }
    }
    row[b.len()]
}

/// LCS-based F-measure with `beta = 1`.
pub fn rouge_l<T: Eq>(y: &[T], reference: &[T]) -> Result<f64, MetricError> {
    if y.is_empty() || reference.is_empty() {
        return Err(MetricError::EmptyInput);
    }
    let l = lcs_len(y, reference) as f64;
    if l == 0.0 {
        return Ok(0.0);
    }
    let p = l / y.len() as f64;
    let r = l / reference.len() as f64;
    Ok(2.0 * p * r / (p + r))
}

/// One evaluated example. Failed examples carry an error and no values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub strategy: String,
    pub id: String,
    pub values: BTreeMap<String, f64>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    /// Successful examples.
    pub count: usize,
    pub failed: usize,
    pub mean: BTreeMap<String, f64>,
}

/// Per-example rows in dataset order plus per-strategy means over the
/// successful rows.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub rows: Vec<MetricRow>,
    pub aggregate: BTreeMap<String, MetricSummary>,
}

impl MetricReport {
    pub fn new(rows: Vec<MetricRow>) -> Self {
        let mut aggregate: BTreeMap<String, MetricSummary> = BTreeMap::new();
        let mut sums: BTreeMap<&str, BTreeMap<&str, f64>> = BTreeMap::new();
        for row in &rows {
            let entry = aggregate.entry(row.strategy.clone()).or_default();
            if row.error.is_some() {
                entry.failed += 1;
                continue;
            }
            entry.count += 1;
            let s = sums.entry(&row.strategy).or_default();
            for (k, v) in &row.values {
                *s.entry(k).or_insert(0.0) += v;
            }
        }
        for (strategy, s) in sums {
            let summary = aggregate.get_mut(strategy).expect("strategy seen");
            let n = summary.count as f64;
            summary.mean = s.into_iter().map(|(k, v)| (k.to_string(), v / n)).collect();
        }
        Self { rows, aggregate }
    }

    /// Concatenates rows (self first) and recomputes the aggregate.
    pub fn merge(self, other: MetricReport) -> Self {
        let mut rows = self.rows;
        rows.extend(other.rows);
        Self::new(rows)
    }

    pub fn count(&self) -> usize {
        self.rows.len()
    }

    pub fn failures(&self) -> usize {
        self.rows.iter().filter(|r| r.error.is_some()).count()
    }

    pub fn mean(&self, strategy: &str, metric: &str) -> Option<f64> {
        self.aggregate.get(strategy)?.mean.get(metric).copied()
    }
}

/// All six columns for one generated response; `f` comes from `scorer`.
pub fn example_metrics<G: GroundednessScorer + ?Sized>(
    result: &DecodeResult,
    example: &GroundedExample,
    scorer: &G,
    vocab: &Vocabulary,
) -> BTreeMap<String, f64> {
    let y = result.tokens.content();
    let zero_if_empty = |r: Result<f64, MetricError>| r.unwrap_or(0.0);
    let f = scorer.score_sequence(y, &example.knowledge);
    let values = [
        zero_if_empty(knowledge_f1(y, &example.knowledge)),
        zero_if_empty(k_copy(&vocab.detokenize(y), &vocab.detokenize(&example.knowledge))),
        zero_if_empty(token_f1(y, &example.response)),
        bleu4(y, &example.response),
        zero_if_empty(rouge_l(y, &example.response)),
        f,
    ];
    METRIC_COLUMNS.iter().map(|c| c.to_string()).zip(values).collect()
}

/// Scores `results` (id, outcome) against the aligned `dataset`. Failed
/// outcomes become error rows. `f` is `scorer`'s groundedness of the
/// response, so strategies decoded with different scorers share one judge.
pub fn evaluate_batch<G: GroundednessScorer + ?Sized>(
    strategy: &str,
    results: &[(String, Result<DecodeResult, String>)],
    dataset: &[GroundedExample],
    scorer: &G,
    vocab: &Vocabulary,
) -> Result<MetricReport, MetricError> {
    if results.is_empty() {
        return Err(MetricError::NoResults);
    }
    for (index, ((id, _), ex)) in results.iter().zip(dataset).enumerate() {
        if *id != ex.id {
            return Err(MetricError::IdMismatch { index, got: id.clone(), expected: ex.id.clone() });
        }
    }
    if results.len() != dataset.len() {
        let index = results.len().min(dataset.len());
        let name = |v: Option<&str>| v.unwrap_or("<missing>").to_string();
        return Err(MetricError::IdMismatch {
            index,
            got: name(results.get(index).map(|r| r.0.as_str())),
            expected: name(dataset.get(index).map(|e| e.id.as_str())),
        });
    }
    let rows = results
        .par_iter()
        .zip(dataset)
        .map(|((id, outcome), ex)| {
            let (values, error) = match outcome {
                Ok(r) => (example_metrics(r, ex, scorer, vocab), None),
                Err(e) => (BTreeMap::new(), Some(e.clone())),
            };
            MetricRow { strategy: strategy.to_string(), id: id.clone(), values, error }
        })
        .collect();
    Ok(MetricReport::new(rows))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grounding::LexicalScorer;
    use crate::lm::TokenSequence;
    use proptest::prelude::*;

    fn w(s: &str) -> Vec<&str> {
        s.split_whitespace().collect()
    }

    #[test]
    fn levenshtein_examples() {
        assert_eq!(levenshtein("kitten", "kitten"), 0);
        assert_eq!(levenshtein("abc", "abd"), 1);
        assert_eq!(levenshtein("", "hello"), 5);
        assert_eq!(levenshtein("kitten", "sitting"), 3);
    }

    #[test]
    fn k_copy_examples() {
        assert_eq!(k_copy("abc", "abc").unwrap(), 1.0);
        assert!((k_copy("abc", "abd").unwrap() - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(k_copy("abc", "xyz").unwrap(), 0.0);
        assert_eq!(k_copy("", ""), Err(MetricError::BothEmpty));
    }

    #[test]
    fn f1_examples() {
        assert_eq!(knowledge_f1(&w("a b"), &w("a b")).unwrap(), 1.0);
        assert_eq!(knowledge_f1(&w("a b"), &w("b c")).unwrap(), 0.5);
        assert_eq!(knowledge_f1(&w("a b"), &w("c d")).unwrap(), 0.0);
        assert_eq!(token_f1(&w("a b"), &w("b c")).unwrap(), 0.5);
        // clipped: one shared "a" out of y = a a, k = a b
        assert_eq!(knowledge_f1(&w("a a"), &w("a b")).unwrap(), 0.5);
        assert_eq!(knowledge_f1::<&str>(&[], &w("a")), Err(MetricError::EmptyInput));
    }

    #[test]
    fn bleu_examples() {
        let r = w("the cat sat on the mat");
        assert!((bleu4(&r, &r) - 1.0).abs() < 1e-12);
        let b = bleu4(&w("the cat sat down"), &w("the cat sat down quickly"));
        assert!((b - (1.0f64 - 5.0 / 4.0).exp()).abs() < 1e-9);
        assert!((b - 0.7788).abs() < 1e-4);
        let short = bleu4(&w("the cat"), &w("the cat"));
        assert!(short < 1e-3 && short > 0.0);
        assert_eq!(bleu4::<&str>(&[], &r), 0.0);
    }

    #[test]
    fn rouge_examples() {
        assert_eq!(rouge_l(&w("a b c"), &w("a b c")).unwrap(), 1.0);
        assert_eq!(rouge_l(&w("a b"), &w("c d")).unwrap(), 0.0);
        let r = rouge_l(&w("a c"), &w("a b c")).unwrap();
        assert!((r - 0.8).abs() < 1e-12);
    }

    fn example(id: &str, k: Vec<usize>, resp: Vec<usize>) -> GroundedExample {
        GroundedExample::new(id, vec![], k, resp).unwrap()
    }

    fn result(ids: Vec<usize>) -> DecodeResult {
        DecodeResult { tokens: TokenSequence::from_ids(ids, 3).unwrap(), ..DecodeResult::default() }
    }

    #[test]
    fn batch_perfect_copy_and_means() {
        let vocab = Vocabulary::new(["a", "b", "c", "</s>"], "</s>").unwrap();
        let data = vec![example("x", vec![0, 1, 2, 0], vec![0, 1, 2, 0]), example("y", vec![0, 1], vec![2, 2])];
        let results = vec![
            ("x".to_string(), Ok(result(vec![0, 1, 2, 0, 3]))),
            ("y".to_string(), Ok(result(vec![0, 2, 3]))),
        ];
        let rep = evaluate_batch("kcts", &results, &data, &LexicalScorer, &vocab).unwrap();
        for c in METRIC_COLUMNS {
            assert_eq!(rep.rows[0].values[c], 1.0, "{c}");
        }
        for c in METRIC_COLUMNS {
            let mean = (rep.rows[0].values[c] + rep.rows[1].values[c]) / 2.0;
            assert!((rep.mean("kcts", c).unwrap() - mean).abs() < 1e-12);
        }
        assert_eq!(rep.rows[1].values["f"], 0.5);
    }

    #[test]
    fn batch_guards_and_failures() {
        let vocab = Vocabulary::new(["a", "</s>"], "</s>").unwrap();
        let data = vec![example("x", vec![0], vec![0]), example("y", vec![0], vec![0])];
        assert_eq!(evaluate_batch("s", &[], &data, &LexicalScorer, &vocab), Err(MetricError::NoResults));
        let bad = vec![("y".to_string(), Ok(result(vec![0])))];
        assert!(matches!(
            evaluate_batch("s", &bad, &data, &LexicalScorer, &vocab),
            Err(MetricError::IdMismatch { .. })
        ));
        let mixed = vec![("x".to_string(), Ok(result(vec![0]))), ("y".to_string(), Err("boom".into()))];
        let rep = evaluate_batch("s", &mixed, &data, &LexicalScorer, &vocab).unwrap();
        assert_eq!(rep.failures(), 1);
        assert_eq!(rep.aggregate["s"].count, 1);
        assert_eq!(rep.mean("s", "KF1"), Some(1.0));
    }

    proptest! {
        #[test]
        fn levenshtein_metric_axioms(a in "[a-d]{0,8}", b in "[a-d]{0,8}", c in "[a-d]{0,8}") {
            prop_assert_eq!(levenshtein(&a, &b), levenshtein(&b, &a));
            prop_assert!(levenshtein(&a, &c) <= levenshtein(&a, &b) + levenshtein(&b, &c));
        }

        #[test]
        fn k_copy_symmetric_and_bounded(a in "[a-d]{1,8}", b in "[a-d]{0,8}") {
            let x = k_copy(&a, &b).unwrap();
            prop_assert_eq!(x, k_copy(&b, &a).unwrap());
            prop_assert!((0.0..=1.0).contains(&x));
        }

        #[test]
        fn f1_permutation_invariant(y in prop::collection::vec(0u8..5, 1..10), k in prop::collection::vec(0u8..5, 1..10)) {
            let mut rev = y.clone();
            rev.reverse();
            prop_assert_eq!(knowledge_f1(&y, &k).unwrap(), knowledge_f1(&rev, &k).unwrap());
            prop_assert!((0.0..=1.0).contains(&token_f1(&y, &k).unwrap()));
        }

        #[test]
        fn overlap_metrics_bounded_and_exact_on_identity(y in prop::collection::vec(0u8..4, 1..10), r in prop::collection::vec(0u8..4, 1..10)) {
            let b = bleu4(&y, &r);
            let l = rouge_l(&y, &r).unwrap();
            prop_assert!((0.0..=1.0 + 1e-12).contains(&b));
            prop_assert!((0.0..=1.0).contains(&l));
            prop_assert_eq!(l == 1.0, y == r);
            if y.len() >= 4 {
                prop_assert!((bleu4(&y, &y) - 1.0).abs() < 1e-12);
                if (b - 1.0).abs() < 1e-12 {
                    prop_assert_eq!(y.len(), r.len());
                }
            }
        }
    }
}
