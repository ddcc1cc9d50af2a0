//! Seeded toy worlds for exercising the decoders without a neural model:
//! tiny exhaustive-search instances and a synthetic grounding suite.

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::decoding::DecodeRequest;
use crate::grounding::GroundedExample;
use crate::lm::{CopyMixLm, LanguageModel, LmError, TableLm, TokenId, Vocabulary};
use crate::mix_seed;

pub const EOS: &str = "</s>";

/// `w0 .. w{n-1}` followed by EOS.
pub fn word_vocabulary(words: usize) -> Vocabulary {
    Vocabulary::new((0..words).map(|i| format!("w{i}")).chain([EOS.to_string()]), EOS)
        .expect("distinct generated tokens")
}

/// Flat Dirichlet draw via normalized exponentials.
fn dirichlet<R: Rng>(n: usize, rng: &mut R) -> Vec<f64> {
    let raw: Vec<f64> = (0..n).map(|_| -(1.0 - rng.gen::<f64>()).ln()).collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|x| x / total).collect()
}

/// A fully tabulated model over every prefix up to `max_len - 1` tokens,
/// forced to end with EOS by position `max_len`, plus a knowledge subset.
#[derive(Clone, Debug)]
pub struct BruteForceInstance {
    pub lm: TableLm,
    pub request: DecodeRequest,
    pub max_len: usize,
}

/// Random instance over `words` word tokens. The first token is never EOS,
/// later positions may stop early, and the position `max_len - 1` context
/// always emits EOS, so every sequence terminates within `max_len` tokens.
/// Knowledge is a random subset of 1 to `words / 2` words.
pub fn brute_force_instance(words: usize, max_len: usize, seed: u64) -> Result<BruteForceInstance, LmError> {
    assert!(words >= 2 && max_len >= 2, "need at least 2 words and max_len >= 2");
    let vocab = word_vocabulary(words);
    let eos = vocab.eos();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut lm = TableLm::new(vocab, max_len - 1);
    let mut frontier: Vec<Vec<TokenId>> = vec![vec![]];
    for depth in 0..max_len {
        let mut next = Vec::new();
        for ctx in frontier {
            let mut probs = vec![0.0; words + 1];
            if depth + 1 == max_len {
                probs[eos] = 1.0;
            } else {
                let with_eos = depth > 0;
                let d = dirichlet(words + usize::from(with_eos), &mut rng);
                probs[..words].copy_from_slice(&d[..words]);
                if with_eos {
                    probs[eos] = d[words];
                }
                for w in 0..words {
                    let mut c = ctx.clone();
                    c.push(w);
                    next.push(c);
                }
            }
            lm.insert(ctx, probs)?;
        }
        frontier = next;
    }
    let k = rng.gen_range(1..=(words / 2).max(1));
    let mut knowledge: Vec<TokenId> = index::sample(&mut rng, words, k).into_vec();
    knowledge.sort_unstable();
    let request = DecodeRequest::new(vec![], knowledge).expect("nonempty knowledge");
    Ok(BruteForceInstance { lm, request, max_len })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SuiteConfig {
    pub words: usize,
    /// Nonzero successors per word in the bigram table.
    pub successors: usize,
    pub eos_prob: f64,
    /// Weight of the copy distribution over the conditioning tokens.
    pub copy_weight: f64,
    pub context_len: usize,
    pub knowledge_len: usize,
    pub reference_len: usize,
    pub seed: u64,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        Self {
            words: 40,
            successors: 6,
            eos_prob: 0.08,
            copy_weight: 0.3,
            context_len: 4,
            knowledge_len: 8,
            reference_len: 8,
            seed: 0,
        }
    }
}

/// Sparse random bigram model: the start context spreads over all words,
/// each word moves to `successors` random words or stops with `eos_prob`.
pub fn random_bigram(cfg: &SuiteConfig) -> TableLm {
    let vocab = word_vocabulary(cfg.words);
    let eos = vocab.eos();
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, 0xb1));
    let mut lm = TableLm::new(vocab, 1);
    let mut start = vec![0.0; cfg.words + 1];
    start[..cfg.words].copy_from_slice(&dirichlet(cfg.words, &mut rng));
    lm.insert(vec![], start).expect("valid start row");
    let successors = cfg.successors.clamp(1, cfg.words);
    for w in 0..cfg.words {
        let mut probs = vec![0.0; cfg.words + 1];
        let targets = index::sample(&mut rng, cfg.words, successors);
        let d = dirichlet(successors, &mut rng);
        for (t, p) in targets.iter().zip(d) {
            probs[t] = p * (1.0 - cfg.eos_prob);
        }
        probs[eos] = cfg.eos_prob;
        lm.insert(vec![w], probs).expect("valid bigram row");
    }
    lm
}

/// Language model and examples of the synthetic grounding task.
#[derive(Clone, Debug)]
pub struct GroundingSuite {
    pub lm: CopyMixLm<TableLm>,
    pub examples: Vec<GroundedExample>,
}

impl GroundingSuite {
    pub fn vocabulary(&self) -> &Vocabulary {
        self.lm.vocabulary()
    }
}

/// `n` examples: random context and knowledge word sets, and a reference
/// drawn from the knowledge words. The model mixes a random bigram table
/// with copying from its conditioning (context then knowledge).
pub fn grounding_suite(cfg: &SuiteConfig, n: usize) -> GroundingSuite {
    let base = random_bigram(cfg);
    let examples = (0..n)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed ^ i as u64, 0x5417e));
            let knowledge: Vec<TokenId> = index::sample(&mut rng, cfg.words, cfg.knowledge_len.min(cfg.words)).into_vec();
            let context: Vec<TokenId> = (0..cfg.context_len).map(|_| rng.gen_range(0..cfg.words)).collect();
            let reference: Vec<TokenId> =
                (0..cfg.reference_len.max(1)).map(|_| *knowledge.choose(&mut rng).expect("nonempty")).collect();
            GroundedExample::new(format!("ex{i:04}"), context, knowledge, reference).expect("nonempty parts")
        })
        .collect();
    GroundingSuite { lm: CopyMixLm::new(base, cfg.copy_weight), examples }
}
