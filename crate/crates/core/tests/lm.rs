use kcd_core::lm::{
    next_logprobs, repetition_penalty, sample_token, sequence_logprob, top_k_filter, top_p_filter, CopyMixLm,
    LanguageModel, LogitVector, TableLm, Vocabulary,
};
use kcd_core::toy::{random_bigram, SuiteConfig};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn vocab(n: usize) -> Vocabulary {
    let mut words: Vec<String> = (0..n - 1).map(|i| format!("w{i}")).collect();
    words.push("</s>".into());
    Vocabulary::new(words, "</s>").unwrap()
}

fn normalize(raw: &[f64]) -> Vec<f64> {
    let total: f64 = raw.iter().sum();
    raw.iter().map(|p| p / total).collect()
}

#[test]
fn table_json_round_trip_preserves_every_distribution() {
    let lm = random_bigram(&SuiteConfig::default());
    let back = TableLm::from_json(&lm.to_json()).unwrap();
    assert_eq!(back.order(), lm.order());
    let unseen = vec![lm.vocabulary().len() - 2];
    let contexts: Vec<Vec<usize>> = lm.contexts().map(<[usize]>::to_vec).chain([unseen]).collect();
    for ctx in contexts {
        let a = next_logprobs(&lm, &ctx, &[]).unwrap();
        let b = next_logprobs(&back, &ctx, &[]).unwrap();
        for (x, y) in a.values().iter().zip(b.values()) {
            assert!((x.exp() - y.exp()).abs() < 1e-12, "{ctx:?}");
        }
    }
}

#[test]
fn bigram_sequence_logprob_is_the_product_of_table_entries() {
    let v = Vocabulary::new(["A", "B", "</s>"], "</s>").unwrap();
    let mut lm = TableLm::new(v, 1);
    lm.insert_tokens(&[], &[("A", 0.6), ("B", 0.4)]).unwrap();
    lm.insert_tokens(&["A"], &[("B", 0.9), ("</s>", 0.1)]).unwrap();
    lm.insert_tokens(&["B"], &[("A", 0.25), ("</s>", 0.75)]).unwrap();
    let got = sequence_logprob(&lm, &[0, 1, 0, 2], &[]).unwrap();
    let expect = (0.6f64 * 0.9 * 0.25 * 0.1).ln();
    assert!((got - expect).abs() < 1e-12);
    assert!(sequence_logprob(&lm, &[1, 1], &[]).unwrap().is_infinite());
}

#[test]
fn copy_mixture_matches_hand_mixture() {
    let v = vocab(5);
    let mut base = TableLm::new(v, 0);
    base.insert(vec![], vec![0.1, 0.2, 0.3, 0.15, 0.25]).unwrap();
    let w = 0.4;
    let lm = CopyMixLm::new(base, w);
    // Conditioning repeats token 2 and includes EOS; neither changes the copy support.
    let cond = [2, 0, 2, 4];
    let got = next_logprobs(&lm, &[], &cond).unwrap().softmax();
    let expect = [0.6 * 0.1 + 0.2, 0.6 * 0.2, 0.6 * 0.3 + 0.2, 0.6 * 0.15, 0.6 * 0.25];
    for (g, e) in got.iter().zip(expect) {
        assert!((g - e).abs() < 1e-12);
    }
    let plain = next_logprobs(&lm, &[], &[]).unwrap().softmax();
    assert!((plain[0] - 0.1).abs() < 1e-12);
}

#[test]
fn sampler_frequencies_follow_the_distribution() {
    let probs = [0.5, 0.05, 0.0, 0.3, 0.15];
    let z = LogitVector::from_probs(&probs);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let n = 40_000;
    let mut hits = [0usize; 5];
    for _ in 0..n {
        hits[sample_token(&z, &mut rng).unwrap()] += 1;
    }
    assert_eq!(hits[2], 0);
    for (h, p) in hits.iter().zip(probs) {
        let se = (p * (1.0 - p) / n as f64).sqrt();
        assert!((*h as f64 / n as f64 - p).abs() <= 5.0 * se + 1e-12, "{hits:?}");
    }
}

#[test]
fn repetition_penalty_divides_positive_and_multiplies_negative() {
    let z = LogitVector::new(vec![2.0, -1.0, 0.5, -3.0]);
    let out = repetition_penalty(&z, &[0, 1, 1], 2.0).unwrap();
    assert_eq!(out.values(), &[1.0, -2.0, 0.5, -3.0]);
    assert!(repetition_penalty(&z, &[0], 0.5).is_err());
    assert!(repetition_penalty(&z, &[9], 1.5).is_err());
}

/// Indices by probability descending, index ascending.
fn order(probs: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..probs.len()).filter(|&i| probs[i] > 0.0).collect();
    idx.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    idx
}

proptest! {
    #[test]
    fn table_lm_returns_inserted_distribution(raw in proptest::collection::vec(0.01f64..1.0, 2..12)) {
        let probs = normalize(&raw);
        let mut lm = TableLm::new(vocab(probs.len()), 0);
        lm.insert(vec![], probs.clone()).unwrap();
        let got = next_logprobs(&lm, &[0, 0], &[]).unwrap();
        for (g, p) in got.values().iter().zip(&probs) {
            prop_assert!((g.exp() - p).abs() < 1e-12);
        }
    }

    #[test]
    fn top_p_keeps_the_smallest_reaching_prefix(raw in proptest::collection::vec(0.0f64..1.0, 2..10), p in 0.05f64..1.0) {
        prop_assume!(raw.iter().any(|&x| x > 0.0));
        let probs = normalize(&raw);
        let z = LogitVector::from_probs(&probs);
        let kept: Vec<usize> = top_p_filter(&z, p).unwrap().unmasked().collect();
        let mut expect = Vec::new();
        let mut mass = 0.0;
        for i in order(&probs) {
            expect.push(i);
            mass += probs[i];
            if mass >= p - 1e-9 {
                break;
            }
        }
        expect.sort();
        prop_assert_eq!(kept, expect);
    }

    #[test]
    fn top_k_keeps_k_largest(raw in proptest::collection::vec(0.01f64..1.0, 2..10), k in 1usize..10) {
        prop_assume!(k <= raw.len());
        let z = LogitVector::from_probs(&normalize(&raw));
        let mut expect: Vec<usize> = order(&normalize(&raw)).into_iter().take(k).collect();
        expect.sort();
        let kept: Vec<usize> = top_k_filter(&z, k).unwrap().unmasked().collect();
        prop_assert_eq!(kept, expect);
    }
}
