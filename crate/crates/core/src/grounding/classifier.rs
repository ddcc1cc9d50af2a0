//! Logistic token-level groundedness classifier over n-gram overlap features.
//!
//! Each position `t` of a response is described by features of
//! `(y_<=t, k)`: whether the current token occurs in the knowledge, the
//! lexical precision of the prefix, whether every prefix token is
//! grounded, contiguous n-gram matches against the knowledge up to the
//! window size, and a hashed token-identity feature. A `PerToken` head
//! instead keeps an independent weight vector per current-token identity,
//! the design used by vocabulary-wide token-level classifiers.

use std::collections::{BTreeMap, HashSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{GroundednessScorer, GroundingError, LabelScheme, LabeledExample};
use crate::lm::TokenId;
use crate::mix_seed;

const BASE_FEATURES: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    Shared,
    PerToken,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierConfig {
    /// Longest knowledge n-gram matched against the tail of the prefix.
    pub window: usize,
    pub epochs: usize,
    /// Upper bound on the step size; the effective step never exceeds the
    /// inverse smoothness constant of the training loss.
    pub learning_rate: f64,
    pub l2: f64,
    pub hash_buckets: usize,
    pub head: HeadKind,
    pub seed: u64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self { window: 2, epochs: 200, learning_rate: 1.0, l2: 1e-4, hash_buckets: 64, head: HeadKind::Shared, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TokenClassifier {
    pub config: ClassifierConfig,
    pub weights: Vec<f64>,
    /// Number of per-token heads (`PerToken` only).
    pub heads: usize,
    /// Training loss before the first epoch and after each epoch.
    pub loss_history: Vec<f64>,
    pub step_size: f64,
}

type Sparse = Vec<(usize, f64)>;

struct Featurizer<'a> {
    config: &'a ClassifierConfig,
    knowledge: HashSet<TokenId>,
    ngrams: Vec<HashSet<&'a [TokenId]>>,
}

impl<'a> Featurizer<'a> {
    fn new(config: &'a ClassifierConfig, knowledge: &'a [TokenId]) -> Self {
        let ngrams = (2..=config.window.max(1)).map(|n| knowledge.windows(n).collect()).collect();
        Self { config, knowledge: knowledge.iter().copied().collect(), ngrams }
    }

    fn dense_len(&self) -> usize {
        BASE_FEATURES + self.config.window.max(1) - 1
    }

    /// Dense features for every position of `y`, computed incrementally.
    fn positions(&self, y: &[TokenId]) -> Vec<Vec<f64>> {
        let mut out = Vec::with_capacity(y.len());
        let mut distinct = HashSet::new();
        let mut distinct_grounded = 0usize;
        let mut grounded = 0usize;
        for (t, &tok) in y.iter().enumerate() {
            let in_k = self.knowledge.contains(&tok);
            if distinct.insert(tok) && in_k {
                distinct_grounded += 1;
            }
            grounded += usize::from(in_k);
            let mut f = Vec::with_capacity(self.dense_len());
            f.push(1.0);
            f.push(f64::from(u8::from(in_k)));
            f.push(distinct_grounded as f64 / distinct.len() as f64);
            f.push(f64::from(u8::from(grounded == t + 1)));
            f.push(grounded as f64 / (t + 1) as f64);
            for (i, set) in self.ngrams.iter().enumerate() {
                let n = i + 2;
                let hit = t + 1 >= n && set.contains(&y[t + 1 - n..=t]);
                f.push(f64::from(u8::from(hit)));
            }
            out.push(f);
        }
        out
    }
}

impl TokenClassifier {
    fn sparse(&self, config: &ClassifierConfig, dense: &[f64], token: TokenId, in_k: bool) -> Sparse {
        sparse_features(config, self.heads, dense, token, in_k)
    }

    fn logit(&self, x: &Sparse) -> f64 {
        x.iter().map(|&(j, v)| self.weights.get(j).copied().unwrap_or(0.0) * v).sum()
    }
}

fn sparse_features(config: &ClassifierConfig, heads: usize, dense: &[f64], token: TokenId, in_k: bool) -> Sparse {
    let d = dense.len();
    match config.head {
        HeadKind::Shared => {
            let mut x: Sparse = dense.iter().copied().enumerate().filter(|(_, v)| *v != 0.0).collect();
            if config.hash_buckets > 0 {
                let bucket = (mix_seed(token as u64, u64::from(in_k)) % config.hash_buckets as u64) as usize;
                x.push((d + bucket, 1.0));
            }
            x
        }
        HeadKind::PerToken => {
            if token >= heads {
                return Vec::new();
            }
            dense
                .iter()
                .copied()
                .enumerate()
                .filter(|(_, v)| *v != 0.0)
                .map(|(j, v)| (token * d + j, v))
                .collect()
        }
    }
}

fn weight_len(config: &ClassifierConfig, heads: usize, d: usize) -> usize {
    match config.head {
        HeadKind::Shared => d + config.hash_buckets,
        HeadKind::PerToken => heads * d,
    }
}

fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Training positions of one example. Truncation-scheme examples only
/// contribute their final (truncated) position.
fn training_positions(ex: &LabeledExample) -> std::ops::Range<usize> {
    let n = ex.base.response.len();
    match ex.scheme {
        LabelScheme::Truncation => n.saturating_sub(1)..n,
        _ => 0..n,
    }
}

/// Fits a logistic token classifier by full-batch gradient descent.
pub fn train_token_classifier(
    dataset: &[LabeledExample],
    config: &ClassifierConfig,
) -> Result<TokenClassifier, GroundingError> {
    if config.window == 0 {
        return Err(GroundingError::InvalidConfig("window must be >= 1".into()));
    }
    if !(config.learning_rate > 0.0) || !(config.l2 >= 0.0) {
        return Err(GroundingError::InvalidConfig("learning_rate must be > 0 and l2 >= 0".into()));
    }
    let heads = dataset
        .iter()
        .flat_map(|e| e.base.response.iter().copied())
        .max()
        .map_or(0, |m| m + 1);
    let d = BASE_FEATURES + config.window - 1;

    let mut samples: Vec<(Sparse, f64)> = Vec::new();
    for ex in dataset {
        let feats = Featurizer::new(config, &ex.base.knowledge);
        let dense = feats.positions(&ex.base.response);
        for t in training_positions(ex) {
            let tok = ex.base.response[t];
            let in_k = feats.knowledge.contains(&tok);
            samples.push((sparse_features(config, heads, &dense[t], tok, in_k), f64::from(ex.labels[t])));
        }
    }
    let positives = samples.iter().filter(|s| s.1 == 1.0).count();
    if samples.is_empty() || positives == 0 || positives == samples.len() {
        return Err(GroundingError::DegenerateDataset);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut weights: Vec<f64> = (0..weight_len(config, heads, d)).map(|_| rng.gen_range(-0.01..0.01)).collect();

    // Descent-lemma step: the mean log-loss Hessian is bounded by
    // max ||x||^2 / 4 plus the ridge term.
    let max_sq = samples
        .iter()
        .map(|(x, _)| x.iter().map(|(_, v)| v * v).sum::<f64>())
        .fold(0.0, f64::max);
    let smoothness = 0.25 * max_sq + config.l2;
    let step = config.learning_rate.min(1.0 / smoothness);

    let n = samples.len() as f64;
    let loss = |w: &[f64]| -> f64 {
        let data: f64 = samples
            .iter()
            .map(|(x, y)| {
                let z: f64 = x.iter().map(|&(j, v)| w[j] * v).sum();
                softplus(z) - y * z
            })
            .sum::<f64>()
            / n;
        data + 0.5 * config.l2 * w.iter().map(|v| v * v).sum::<f64>()
    };

    let mut history = vec![loss(&weights)];
    let mut grad = vec![0.0; weights.len()];
    for _ in 0..config.epochs {
        grad.iter_mut().for_each(|g| *g = 0.0);
        for (x, y) in &samples {
            let z: f64 = x.iter().map(|&(j, v)| weights[j] * v).sum();
            let r = (sigmoid(z) - y) / n;
            for &(j, v) in x {
                grad[j] += r * v;
            }
        }
        for (w, g) in weights.iter_mut().zip(&grad) {
            *w -= step * (g + config.l2 * *w);
        }
        history.push(loss(&weights));
    }

    Ok(TokenClassifier { config: config.clone(), weights, heads, loss_history: history, step_size: step })
}

impl GroundednessScorer for TokenClassifier {
    fn score_prefix(&self, prefix: &[TokenId], knowledge: &[TokenId]) -> f64 {
        let Some(&tok) = prefix.last() else {
            return 1.0;
        };
        let feats = Featurizer::new(&self.config, knowledge);
        let dense = feats.positions(prefix);
        let in_k = feats.knowledge.contains(&tok);
        let x = self.sparse(&self.config, dense.last().expect("nonempty prefix"), tok, in_k);
        sigmoid(self.logit(&x))
    }
}

impl TokenClassifier {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("classifier serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, GroundingError> {
        serde_json::from_str(text).map_err(|e| GroundingError::InvalidConfig(format!("bad classifier file: {e}")))
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SchemeAccuracy {
    pub token_accuracy: f64,
    pub sequence_accuracy: f64,
    pub tokens: usize,
    pub sequences: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierReport {
    pub threshold: f64,
    pub overall: SchemeAccuracy,
    pub per_scheme: BTreeMap<String, SchemeAccuracy>,
}

#[derive(Default)]
struct Tally {
    token_hits: usize,
    tokens: usize,
    seq_hits: usize,
    seqs: usize,
}

impl Tally {
    fn finish(&self) -> SchemeAccuracy {
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        SchemeAccuracy {
            token_accuracy: ratio(self.token_hits, self.tokens),
            sequence_accuracy: ratio(self.seq_hits, self.seqs),
            tokens: self.tokens,
            sequences: self.seqs,
        }
    }
}

/// Token- and sequence-level accuracy at `threshold` (a score at or above
/// the threshold predicts grounded).
pub fn evaluate_classifier<G: GroundednessScorer + ?Sized>(
    scorer: &G,
    test: &[LabeledExample],
    threshold: f64,
) -> Result<ClassifierReport, GroundingError> {
    if test.is_empty() {
        return Err(GroundingError::Empty("test set"));
    }
    let mut overall = Tally::default();
    let mut per: BTreeMap<String, Tally> = BTreeMap::new();
    for ex in test {
        let y = &ex.base.response;
        let k = &ex.base.knowledge;
        let tally = per.entry(ex.scheme.to_string()).or_default();
        for t in 0..y.len() {
            let predicted = u8::from(scorer.score_prefix(&y[..=t], k) >= threshold);
            let hit = usize::from(predicted == ex.labels[t]);
            overall.token_hits += hit;
            overall.tokens += 1;
            tally.token_hits += hit;
            tally.tokens += 1;
        }
        let predicted = u8::from(scorer.score_sequence(y, k) >= threshold);
        let hit = usize::from(predicted == ex.sequence_label());
        overall.seq_hits += hit;
        overall.seqs += 1;
        tally.seq_hits += hit;
        tally.seqs += 1;
    }
    Ok(ClassifierReport {
        threshold,
        overall: overall.finish(),
        per_scheme: per.into_iter().map(|(k, v)| (k, v.finish())).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grounding::{ConstantScorer, GroundedExample};

    /// Labels each token by knowledge membership; knowledge is a random
    /// half of a 20-token vocabulary.
    fn membership_dataset(n: usize, seed: u64) -> Vec<LabeledExample> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| {
                let knowledge: Vec<TokenId> = (0..20).filter(|_| rng.gen_bool(0.5)).collect();
                let knowledge = if knowledge.is_empty() { vec![0] } else { knowledge };
                let response: Vec<TokenId> = (0..rng.gen_range(3..9)).map(|_| rng.gen_range(0..20)).collect();
                let labels = response.iter().map(|t| u8::from(knowledge.contains(t))).collect();
                let base = GroundedExample::new(format!("m{i}"), vec![], knowledge, response).unwrap();
                LabeledExample { base, labels, inflection: None, scheme: LabelScheme::TokenLevel }
            })
            .collect()
    }

    /// Token accuracy against the per-position membership labels.
    fn membership_accuracy(model: &TokenClassifier, test: &[LabeledExample]) -> f64 {
        let (mut hits, mut total) = (0, 0);
        for ex in test {
            for t in 0..ex.base.response.len() {
                let p = model.score_prefix(&ex.base.response[..=t], &ex.base.knowledge) >= 0.5;
                hits += usize::from(u8::from(p) == ex.labels[t]);
                total += 1;
            }
        }
        hits as f64 / total as f64
    }

    #[test]
    fn separable_membership_task() {
        let cfg = ClassifierConfig { window: 1, epochs: 150, ..Default::default() };
        let model = train_token_classifier(&membership_dataset(400, 1), &cfg).unwrap();
        let acc = membership_accuracy(&model, &membership_dataset(200, 2));
        assert!(acc >= 0.95, "held-out accuracy {acc}");
    }

    #[test]
    fn loss_never_increases() {
        let cfg = ClassifierConfig { window: 2, epochs: 80, learning_rate: 50.0, ..Default::default() };
        let model = train_token_classifier(&membership_dataset(150, 3), &cfg).unwrap();
        for w in model.loss_history.windows(2) {
            assert!(w[1] <= w[0] + 1e-6, "loss rose from {} to {}", w[0], w[1]);
        }
        assert!(model.loss_history.last() < model.loss_history.first());
    }

    #[test]
    fn same_seed_same_weights() {
        let data = membership_dataset(60, 4);
        let cfg = ClassifierConfig { epochs: 20, seed: 11, ..Default::default() };
        let a = train_token_classifier(&data, &cfg).unwrap();
        let b = train_token_classifier(&data, &cfg).unwrap();
        assert_eq!(a.weights, b.weights);
        let c = train_token_classifier(&data, &ClassifierConfig { seed: 12, ..cfg }).unwrap();
        assert_ne!(a.weights, c.weights);
    }

    #[test]
    fn scores_in_unit_interval_including_empty_prefix() {
        let model = train_token_classifier(&membership_dataset(50, 5), &ClassifierConfig::default()).unwrap();
        assert!((0.0..=1.0).contains(&model.score_prefix(&[], &[1, 2])));
        for ex in membership_dataset(20, 6) {
            for t in 0..ex.base.response.len() {
                let s = model.score_prefix(&ex.base.response[..=t], &ex.base.knowledge);
                assert!((0.0..=1.0).contains(&s));
            }
        }
    }

    #[test]
    fn single_class_dataset_rejected() {
        let mut data = membership_dataset(10, 7);
        for ex in &mut data {
            ex.labels.iter_mut().for_each(|l| *l = 1);
        }
        assert_eq!(train_token_classifier(&data, &ClassifierConfig::default()), Err(GroundingError::DegenerateDataset));
    }

    #[test]
    fn per_token_head_trains_and_serializes() {
        let cfg = ClassifierConfig { head: HeadKind::PerToken, epochs: 600, ..Default::default() };
        let model = train_token_classifier(&membership_dataset(300, 8), &cfg).unwrap();
        assert_eq!(model.heads, 20);
        assert!(membership_accuracy(&model, &membership_dataset(100, 9)) > 0.9);
        // tokens never seen in training get an untrained head
        assert_eq!(model.score_prefix(&[25], &[25]), 0.5);
        let back = TokenClassifier::from_json(&model.to_json()).unwrap();
        assert_eq!(back, model);
    }

    struct TruthScorer;

    impl GroundednessScorer for TruthScorer {
        fn score_prefix(&self, prefix: &[TokenId], knowledge: &[TokenId]) -> f64 {
            // RIPA truth: grounded while every token so far is in k
            f64::from(u8::from(prefix.iter().all(|t| knowledge.contains(t))))
        }
    }

    fn ripa_set() -> Vec<LabeledExample> {
        let k = vec![0, 1, 2];
        let pos = GroundedExample::new("p", vec![], k.clone(), vec![0, 1, 2, 0]).unwrap();
        let neg = GroundedExample::new("n", vec![], k, vec![0, 1, 7, 8]).unwrap();
        vec![
            LabeledExample::positive(pos),
            LabeledExample { base: neg, labels: vec![1, 1, 0, 0], inflection: Some(2), scheme: LabelScheme::Ripa },
        ]
    }

    #[test]
    fn oracle_scorer_is_perfect() {
        let report = evaluate_classifier(&TruthScorer, &ripa_set(), 0.5).unwrap();
        assert_eq!(report.overall.token_accuracy, 1.0);
        assert_eq!(report.overall.sequence_accuracy, 1.0);
        assert_eq!(report.per_scheme["ripa"].tokens, 4);
        assert_eq!(report.per_scheme["positive"].sequences, 1);
    }

    #[test]
    fn constant_scorer_is_chance_on_balanced_set() {
        let report = evaluate_classifier(&ConstantScorer(0.5), &ripa_set(), 0.5).unwrap();
        assert_eq!(report.overall.token_accuracy, 0.75);
        assert_eq!(report.overall.sequence_accuracy, 0.5);
        let data: Vec<LabeledExample> = membership_dataset(400, 10)
            .into_iter()
            .flat_map(|e| {
                let b = e.base.clone();
                [crate::grounding::token_level_labels(&b, 1), crate::grounding::token_level_labels(&b, 0)]
            })
            .collect();
        let report = evaluate_classifier(&ConstantScorer(0.5), &data, 0.5).unwrap();
        assert!((report.overall.token_accuracy - 0.5).abs() < 1e-12);
        assert!(evaluate_classifier(&ConstantScorer(0.5), &[], 0.5).is_err());
    }
}
