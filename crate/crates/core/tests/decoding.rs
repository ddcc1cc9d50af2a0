use std::collections::BTreeMap;

use kcd_core::decoding::{
    brute_force_optimal, compose_logit_bias, kcts_decode, nado_weighted_sample, nucleus_decode,
    prefix_constrained_decode, sequence_objective, weighted_decode, DecodeConfig, DecodeError, DecodeRequest, Kcts,
    WeightedMode,
};
use kcd_core::grounding::{lexical_groundedness, ConstantScorer, LexicalScorer};
use kcd_core::lm::{next_logprobs, sample_token, LanguageModel, LogitVector, TokenId};
use kcd_core::toy::{brute_force_instance, grounding_suite, SuiteConfig};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn requests(n: usize) -> (kcd_core::lm::CopyMixLm<kcd_core::lm::TableLm>, Vec<DecodeRequest>) {
    let suite = grounding_suite(&SuiteConfig::default(), n);
    let reqs = suite
        .examples
        .iter()
        .map(|e| DecodeRequest::new(e.context.clone(), e.knowledge.clone()).unwrap())
        .collect();
    (suite.lm, reqs)
}

fn small_cfg() -> DecodeConfig {
    DecodeConfig { num_simulations: 12, search_width: 6, max_new_tokens: 10, ..DecodeConfig::default() }
}

fn strip_eos(y: &[TokenId], eos: TokenId) -> &[TokenId] {
    match y.last() {
        Some(&t) if t == eos => &y[..y.len() - 1],
        _ => y,
    }
}

/// Top `width` ids by log-probability, lower id first on ties.
fn top(lp: &LogitVector, width: usize) -> Vec<TokenId> {
    let mut idx: Vec<TokenId> = (0..lp.len()).filter(|&i| lp[i].is_finite()).collect();
    idx.sort_by(|&a, &b| lp[b].total_cmp(&lp[a]).then(a.cmp(&b)));
    idx.truncate(width);
    idx
}

/// Greedy `argmax ln P + ln f` written against the public LM interface.
fn greedy_oracle<M: LanguageModel>(lm: &M, req: &DecodeRequest, cfg: &DecodeConfig) -> (Vec<TokenId>, usize) {
    let eos = lm.vocabulary().eos();
    let cond = req.conditioning();
    let mut y: Vec<TokenId> = Vec::new();
    let mut scored = 0;
    while y.last() != Some(&eos) && y.len() < cfg.max_new_tokens {
        let lp = next_logprobs(lm, &y, &cond).unwrap();
        let cands = top(&lp, cfg.search_width);
        scored += cands.len();
        let f = |t: TokenId| {
            let mut ext = y.clone();
            ext.push(t);
            lexical_groundedness(strip_eos(&ext, eos), &req.knowledge)
        };
        let best = if cands.iter().all(|&t| f(t) == 0.0) {
            cands[0]
        } else {
            *cands
                .iter()
                .max_by(|&&a, &&b| {
                    (lp[a] + f(a).ln())
                        .total_cmp(&(lp[b] + f(b).ln()))
                        .then(f(a).total_cmp(&f(b)))
                        .then(b.cmp(&a))
                })
                .unwrap()
        };
        y.push(best);
    }
    (y, scored)
}

#[test]
fn weighted_decode_matches_greedy_oracle() {
    let (lm, reqs) = requests(30);
    let cfg = small_cfg();
    for req in &reqs {
        let (expect, scored) = greedy_oracle(&lm, req, &cfg);
        for mode in [WeightedMode::Kwd, WeightedMode::FudgeStyle] {
            let r = weighted_decode(&lm, &LexicalScorer, req, &cfg, mode).unwrap();
            assert_eq!(r.tokens.ids(), &expect[..]);
            assert_eq!(r.scorer_calls, scored);
            assert_eq!(r.lm_forward_calls, expect.len());
        }
    }
}

#[test]
fn nado_with_flat_scorer_samples_the_truncated_lm() {
    let (lm, reqs) = requests(10);
    let cfg = DecodeConfig { seed: 5, ..small_cfg() };
    let eos = lm.vocabulary().eos();
    for req in &reqs {
        let r = nado_weighted_sample(&lm, &ConstantScorer(0.7), req, &cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut y: Vec<TokenId> = Vec::new();
        while y.last() != Some(&eos) && y.len() < cfg.max_new_tokens {
            let lp = next_logprobs(&lm, &y, &req.conditioning()).unwrap();
            let cands = top(&lp, cfg.search_width);
            let mass: f64 = cands.iter().map(|&t| lp[t].exp()).sum();
            let q: Vec<f64> = cands.iter().map(|&t| lp[t].exp() / mass).collect();
            y.push(cands[sample_token(&LogitVector::from_probs(&q), &mut rng).unwrap()]);
        }
        assert_eq!(r.tokens.ids(), &y[..]);
        assert_eq!(r.fallback_steps, 0);
    }
}

#[test]
fn kcts_spends_one_scorer_call_per_simulation() {
    let (lm, reqs) = requests(10);
    let cfg = small_cfg();
    for req in &reqs {
        let r = kcts_decode(&lm, &LexicalScorer, req, &cfg).unwrap();
        let sims = cfg.num_simulations * r.tokens.len();
        assert_eq!(r.scorer_calls, sims);
        assert_eq!(r.lm_forward_calls + r.terminal_evaluations, sims);
        assert_eq!(r.per_step_scores.len(), r.tokens.len());
        assert!(r.per_step_scores.iter().all(|s| (0.0..=1.0).contains(s)));
        let f = lexical_groundedness(r.tokens.content(), &req.knowledge);
        assert_eq!(r.final_groundedness, Some(f));
    }
}

#[test]
fn tree_invariants_hold_while_stepping() {
    let (lm, reqs) = requests(4);
    let cfg = DecodeConfig { num_simulations: 25, ..small_cfg() };
    for req in &reqs {
        let mut search = Kcts::new(&lm, &LexicalScorer, req, &cfg).unwrap();
        while !search.is_done() {
            for _ in 0..cfg.num_simulations {
                search.simulate().unwrap();
                search.tree().check_invariants().unwrap();
            }
            let root = search.tree().root();
            let most = search.tree().children(root).map(|c| c.visits).max().unwrap();
            let token = search.commit().unwrap();
            // The new root is the committed child with its statistics kept.
            let kept = search.tree().node(search.tree().root());
            assert_eq!(kept.visits, most);
            assert_eq!(search.generated().last(), Some(&token));
            search.tree().check_invariants().unwrap();
        }
    }
}

#[test]
fn prefix_constrained_spans_nucleus_and_full_search() {
    let (lm, reqs) = requests(10);
    for req in &reqs {
        let zero = DecodeConfig { constrained_prefix_len: Some(0), ..small_cfg() };
        let a = prefix_constrained_decode(&lm, &LexicalScorer, req, &zero).unwrap();
        let b = nucleus_decode(&lm, req, &zero).unwrap();
        assert_eq!(a.tokens, b.tokens);
        assert_eq!(a.scorer_calls, 0);

        let full = DecodeConfig { constrained_prefix_len: Some(small_cfg().max_new_tokens), ..small_cfg() };
        let c = prefix_constrained_decode(&lm, &LexicalScorer, req, &full).unwrap();
        let d = kcts_decode(&lm, &LexicalScorer, req, &full).unwrap();
        assert_eq!(c, d);
    }
    let missing = prefix_constrained_decode(&lm, &LexicalScorer, &reqs[0], &small_cfg());
    assert!(matches!(missing, Err(DecodeError::InvalidConfig(_))));
}

#[test]
fn decoders_are_deterministic_per_seed() {
    let (lm, reqs) = requests(5);
    let cfg = small_cfg();
    for req in &reqs {
        assert_eq!(nucleus_decode(&lm, req, &cfg).unwrap(), nucleus_decode(&lm, req, &cfg).unwrap());
        assert_eq!(
            nado_weighted_sample(&lm, &LexicalScorer, req, &cfg).unwrap(),
            nado_weighted_sample(&lm, &LexicalScorer, req, &cfg).unwrap()
        );
        assert_eq!(kcts_decode(&lm, &LexicalScorer, req, &cfg).unwrap(), kcts_decode(&lm, &LexicalScorer, req, &cfg).unwrap());
    }
}

#[test]
fn invalid_configs_are_rejected() {
    let (lm, reqs) = requests(1);
    let bad = [
        DecodeConfig { c_puct: -1.0, ..small_cfg() },
        DecodeConfig { top_p: 0.0, ..small_cfg() },
        DecodeConfig { temperature: 0.0, ..small_cfg() },
        DecodeConfig { repetition_penalty: 0.5, ..small_cfg() },
        DecodeConfig { num_simulations: 0, ..small_cfg() },
        DecodeConfig { search_width: 0, ..small_cfg() },
    ];
    for cfg in bad {
        assert!(cfg.validate().is_err(), "{cfg:?}");
        assert!(kcts_decode(&lm, &LexicalScorer, &reqs[0], &cfg).is_err());
    }
    assert!(DecodeRequest::new(vec![0], vec![]).is_err());
}

/// Every EOS-terminated sequence up to `max_len`, with its objective.
fn enumerate<M: LanguageModel>(lm: &M, req: &DecodeRequest, max_len: usize) -> Vec<(Vec<TokenId>, f64)> {
    let eos = lm.vocabulary().eos();
    let cond = req.conditioning();
    let mut out = Vec::new();
    let mut stack: Vec<(Vec<TokenId>, f64)> = vec![(Vec::new(), 0.0)];
    while let Some((y, lp)) = stack.pop() {
        if y.len() == max_len {
            continue;
        }
        let next = next_logprobs(lm, &y, &cond).unwrap();
        for t in 0..next.len() {
            if !next[t].is_finite() {
                continue;
            }
            let mut ext = y.clone();
            ext.push(t);
            if t == eos {
                let f = lexical_groundedness(&y, &req.knowledge);
                out.push((ext, lp + next[t] + f.ln()));
            } else {
                stack.push((ext, lp + next[t]));
            }
        }
    }
    out
}

#[test]
fn brute_force_agrees_with_independent_enumeration() {
    for seed in 0..15 {
        let inst = brute_force_instance(4, 4, seed).unwrap();
        let (seq, best) = brute_force_optimal(&inst.lm, &LexicalScorer, &inst.request, inst.max_len).unwrap();
        let all = enumerate(&inst.lm, &inst.request, inst.max_len);
        let max = all.iter().map(|(_, v)| *v).fold(f64::NEG_INFINITY, f64::max);
        assert!((best - max).abs() < 1e-9, "seed {seed}: {best} vs {max}");
        let again = sequence_objective(&inst.lm, &LexicalScorer, &inst.request, seq.ids()).unwrap();
        assert!((again - best).abs() < 1e-9);
        for (y, _) in all.iter().take(50) {
            let direct = sequence_objective(&inst.lm, &LexicalScorer, &inst.request, y).unwrap();
            assert!(direct <= best + 1e-9);
        }
    }
}

#[test]
fn oversized_brute_force_is_refused() {
    let inst = brute_force_instance(5, 4, 0).unwrap();
    assert!(matches!(
        brute_force_optimal(&inst.lm, &LexicalScorer, &inst.request, 12),
        Err(DecodeError::SearchSpaceTooLarge(_))
    ));
}

proptest! {
    #[test]
    fn composed_bias_matches_formula(
        base in proptest::collection::vec(-20.0f64..5.0, 6),
        proxy in proptest::collection::vec(prop_oneof![Just(f64::NEG_INFINITY), -60.0f64..0.0], 6),
        scores in proptest::collection::vec(0.0f64..1.0, 6),
        alpha in 0.0f64..4.0,
    ) {
        let f: BTreeMap<TokenId, f64> = scores.iter().copied().enumerate().filter(|(i, _)| i % 3 != 2).collect();
        let out = compose_logit_bias(&LogitVector::new(base.clone()), &LogitVector::new(proxy.clone()), &f, alpha);
        for i in 0..6 {
            let expect = if proxy[i].is_finite() {
                let fi = f.get(&i).copied().unwrap_or(0.0).max(1e-6);
                base[i] + (alpha * (proxy[i] + fi.ln())).clamp(-100.0, 100.0)
            } else {
                base[i]
            };
            prop_assert_eq!(out[i], expect);
        }
    }
}
