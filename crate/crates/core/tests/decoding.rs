use std::hash::{DefaultHasher, Hash, Hasher};

use persum_core::generate::{beam_search_hypothesis, beam_search_with, greedy_search, GenConfig, ModelScorer, NextToken};
use persum_core::model::log_softmax;
use persum_core::params::{ModelConfig, Parameters};
use persum_core::tokenizer::{Encoding, EOS_ID, SOS_ID};
use persum_core::Result;
use proptest::prelude::*;

/// Next-token distribution drawn from a hash of the prefix.
struct Hashed {
    seed: u64,
    vocab: usize,
    sharpness: f64,
}

impl NextToken for Hashed {
    fn log_probs(&self, prefix: &[u32]) -> Result<Vec<f64>> {
        let logits: Vec<f64> = (0..self.vocab)
            .map(|t| {
                let mut h = DefaultHasher::new();
                (self.seed, prefix, t).hash(&mut h);
                (h.finish() >> 11) as f64 / (1u64 << 53) as f64 * self.sharpness
            })
            .collect();
        Ok(log_softmax(&logits))
    }
}

/// Best cumulative log-probability over every sequence that ends in EOS or
/// reaches `max_len`.
fn exhaustive_best(model: &impl NextToken, prefix: &mut Vec<u32>, score: f64, max_len: usize) -> f64 {
    let lp = model.log_probs(prefix).unwrap();
    let mut best = f64::NEG_INFINITY;
    for (t, &v) in lp.iter().enumerate() {
        let s = score + v;
        if t as u32 == EOS_ID || prefix.len() + 1 == max_len {
            best = best.max(s);
        } else {
            prefix.push(t as u32);
            best = best.max(exhaustive_best(model, prefix, s, max_len));
            prefix.pop();
        }
    }
    best
}

fn tiny_model(seed: u64) -> (ModelConfig, Parameters, Encoding) {
    let config = ModelConfig {
        vocab_size: 12,
        d_model: 8,
        n_heads: 2,
        n_enc_layers: 1,
        n_dec_layers: 1,
        d_ff: 16,
        window: 4,
        max_enc_len: 10,
        max_dec_len: 6,
        dropout: 0.0,
    };
    let params = Parameters::init(&config, seed);
    let ids: Vec<u32> = std::iter::once(SOS_ID)
        .chain((0..6).map(|i| 4 + ((seed as u32).wrapping_mul(7).wrapping_add(i * 5)) % 8))
        .chain([EOS_ID])
        .collect();
    (config, params, Encoding::from_ids(ids, &[0]))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn outputs_end_in_eos_or_reach_the_cap(
        seed in any::<u64>(),
        vocab in 4usize..9,
        max_len in 1usize..6,
        beam in 1usize..5,
        sharpness in 0.5f64..8.0,
    ) {
        let model = Hashed { seed, vocab, sharpness };
        for hyp in [greedy_search(&model, max_len).unwrap(), beam_search_with(&model, beam, max_len, 0.0).unwrap()] {
            prop_assert!(hyp.finished);
            prop_assert!(!hyp.tokens.is_empty() && hyp.tokens.len() <= max_len);
            prop_assert!(hyp.tokens.last() == Some(&EOS_ID) || hyp.tokens.len() == max_len);
            prop_assert!(!hyp.tokens[..hyp.tokens.len() - 1].contains(&EOS_ID));
        }
    }

    #[test]
    fn beam_one_is_greedy(seed in any::<u64>(), vocab in 4usize..9, max_len in 1usize..8) {
        let model = Hashed { seed, vocab, sharpness: 3.0 };
        prop_assert_eq!(beam_search_with(&model, 1, max_len, 0.0).unwrap(), greedy_search(&model, max_len).unwrap());
    }

    #[test]
    fn beam_covering_every_prefix_is_exact_search(seed in any::<u64>(), vocab in 4usize..7, max_len in 1usize..4) {
        let model = Hashed { seed, vocab, sharpness: 4.0 };
        let exact = exhaustive_best(&model, &mut Vec::new(), 0.0, max_len);
        let beam = beam_search_with(&model, vocab.pow(max_len as u32), max_len, 0.0).unwrap();
        prop_assert!((beam.score - exact).abs() < 1e-12, "beam {} exact {}", beam.score, exact);
        prop_assert!(beam.score >= greedy_search(&model, max_len).unwrap().score - 1e-12);
    }
}

/// Token 4 leads to a path that later becomes near-certain, while token 5
/// opens two siblings that each beat the best continuation of 4. A beam
/// of two drops the greedy path at step two.
struct Trap;

impl NextToken for Trap {
    fn log_probs(&self, prefix: &[u32]) -> Result<Vec<f64>> {
        let p: Vec<f64> = match prefix {
            [] => vec![0.0, 0.0, 0.0, 0.0, 0.4, 0.35, 0.25],
            [4] => vec![0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.4, 0.3, 0.3],
            [5] => vec![0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.5, 0.5],
            [4, 6] => vec![0.0, 0.0, 1.0],
            _ => vec![0.0, 0.0, 0.5, 0.0, 0.5],
        };
        let mut p = p;
        p.resize(9, 0.0);
        Ok(p.into_iter().map(f64::ln).collect())
    }
}

#[test]
fn narrow_beam_can_lose_the_greedy_path() {
    let greedy = greedy_search(&Trap, 3).unwrap();
    assert_eq!(greedy.tokens, vec![4, 6, EOS_ID]);
    let beam2 = beam_search_with(&Trap, 2, 3, 0.0).unwrap();
    assert!(beam2.score < greedy.score, "beam {:?} greedy {:?}", beam2, greedy);
    let beam3 = beam_search_with(&Trap, 3, 3, 0.0).unwrap();
    assert_eq!(beam3.tokens, greedy.tokens);
    assert!(beam_search_with(&Trap, 1, 3, 0.0).unwrap().score > beam2.score);
}

/// The same failure on a randomly initialized model: a beam of three keeps
/// the wrong prefixes at step four, while beams of two and four keep the
/// greedy path.
#[test]
fn beam_width_is_not_monotone_on_a_model() {
    let (config, params, source) = tiny_model(9416531276678114213);
    let scorer = ModelScorer::new(&params, &config, &source).unwrap();
    let greedy = greedy_search(&scorer, config.max_dec_len).unwrap();
    assert_eq!(greedy.tokens, vec![10, 0, 7, EOS_ID]);
    let score = |k| {
        let gcfg = GenConfig { beam_size: k, max_output_len: config.max_dec_len, length_penalty: 0.0 };
        beam_search_hypothesis(&params, &config, &source, &gcfg).unwrap().score
    };
    assert_eq!(score(2), greedy.score);
    assert!(score(3) < greedy.score);
    assert_eq!(score(4), greedy.score);
}
