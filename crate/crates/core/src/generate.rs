//! Greedy and beam-search decoding.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{encode_document, next_token_log_probs, EncoderOutput};
use crate::params::{ModelConfig, Parameters};
use crate::tokenizer::{Encoding, EOS_ID, SOS_ID};

/// Hard cap on generated tokens, EOS included.
pub const MAX_OUTPUT_LEN: usize = 512;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenConfig {
    pub beam_size: usize,
    pub max_output_len: usize,
    /// Final hypotheses are ranked by `score / len^alpha`; 0 ranks by raw
    /// cumulative log-probability.
    pub length_penalty: f64,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig { beam_size: 2, max_output_len: MAX_OUTPUT_LEN, length_penalty: 0.0 }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.beam_size == 0 {
            return Err(Error::invalid("beam_size", "must be at least 1"));
        }
        if self.max_output_len == 0 || self.max_output_len > MAX_OUTPUT_LEN {
            return Err(Error::invalid("max_output_len", format!("must be between 1 and {MAX_OUTPUT_LEN}")));
        }
        if !self.length_penalty.is_finite() {
            return Err(Error::invalid("length_penalty", "must be finite"));
        }
        Ok(())
    }
}

/// Anything that can score the next token given the tokens generated so far
/// (SOS excluded).
pub trait NextToken {
    fn log_probs(&self, prefix: &[u32]) -> Result<Vec<f64>>;
}

/// Next-token scores from an encoder-decoder model over one encoded
/// document.
pub struct ModelScorer<'a> {
    params: &'a Parameters,
    config: &'a ModelConfig,
    memory: EncoderOutput,
}

impl<'a> ModelScorer<'a> {
    pub fn new(params: &'a Parameters, config: &'a ModelConfig, source: &Encoding) -> Result<Self> {
        let memory = encode_document(params, config, source)?;
        Ok(ModelScorer { params, config, memory })
    }
}

impl NextToken for ModelScorer<'_> {
    fn log_probs(&self, prefix: &[u32]) -> Result<Vec<f64>> {
        let mut ids = Vec::with_capacity(prefix.len() + 1);
        ids.push(SOS_ID);
        ids.extend_from_slice(prefix);
        next_token_log_probs(self.params, self.config, &self.memory, &ids)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BeamHypothesis {
    pub tokens: Vec<u32>,
    /// Cumulative log-probability.
    pub score: f64,
    pub finished: bool,
}

impl BeamHypothesis {
    fn ranking(&self, alpha: f64) -> f64 {
        if alpha == 0.0 || self.tokens.is_empty() {
            self.score
        } else {
            self.score / (self.tokens.len() as f64).powf(alpha)
        }
    }
}

/// Picks the highest-scoring token at every step, lowest id on ties.
pub fn greedy_search(model: &impl NextToken, max_len: usize) -> Result<BeamHypothesis> {
    let mut hyp = BeamHypothesis { tokens: Vec::new(), score: 0.0, finished: false };
    while hyp.tokens.len() < max_len {
        let lp = model.log_probs(&hyp.tokens)?;
        let mut best = 0;
        let mut best_score = f64::NEG_INFINITY;
        for (t, &v) in lp.iter().enumerate() {
            let score = hyp.score + v;
            if score > best_score {
                best = t;
                best_score = score;
            }
        }
        hyp.score = best_score;
        hyp.tokens.push(best as u32);
        if best as u32 == EOS_ID {
            break;
        }
    }
    hyp.finished = true;
    Ok(hyp)
}

fn by_score(a: &(f64, usize, u32), b: &(f64, usize, u32)) -> Ordering {
    b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2))
}

/// Length-synchronous beam search. Keeps `beam_size` live hypotheses, moves
/// EOS-terminated ones to a pool, and returns the pool's best.
pub fn beam_search_with(model: &impl NextToken, beam_size: usize, max_len: usize, alpha: f64) -> Result<BeamHypothesis> {
    let mut live = vec![BeamHypothesis { tokens: Vec::new(), score: 0.0, finished: false }];
    let mut pool: Vec<BeamHypothesis> = Vec::new();
    for len in 1..=max_len {
        let mut candidates = Vec::new();
        for (b, hyp) in live.iter().enumerate() {
            let lp = model.log_probs(&hyp.tokens)?;
            candidates.extend(lp.iter().enumerate().map(|(t, &v)| (hyp.score + v, b, t as u32)));
        }
        candidates.sort_by(by_score);
        let mut next = Vec::with_capacity(beam_size);
        let mut capped = 0;
        for &(score, b, t) in &candidates {
            if next.len() + capped == beam_size {
                break;
            }
            let mut tokens = live[b].tokens.clone();
            tokens.push(t);
            if t == EOS_ID {
                pool.push(BeamHypothesis { tokens, score, finished: true });
            } else if len == max_len {
                pool.push(BeamHypothesis { tokens, score, finished: true });
                capped += 1;
            } else {
                next.push(BeamHypothesis { tokens, score, finished: false });
            }
        }
        live = next;
        if live.is_empty() {
            break;
        }
        // Raw scores only decrease as hypotheses grow, so nothing still live
        // can overtake the pool's best.
        if alpha == 0.0 {
            let best_pool = pool.iter().map(|h| h.score).fold(f64::NEG_INFINITY, f64::max);
            if best_pool >= live[0].score {
                break;
            }
        }
    }
    let mut best: Option<BeamHypothesis> = None;
    for hyp in pool {
        if best.as_ref().is_none_or(|b| hyp.ranking(alpha) > b.ranking(alpha)) {
            best = Some(hyp);
        }
    }
    Ok(best.expect("the last step always fills the pool"))
}

fn effective_len(config: &ModelConfig, gcfg: &GenConfig) -> usize {
    gcfg.max_output_len.min(config.max_dec_len)
}

pub fn greedy_decode(params: &Parameters, config: &ModelConfig, source: &Encoding, gcfg: &GenConfig) -> Result<Vec<u32>> {
    gcfg.validate()?;
    let scorer = ModelScorer::new(params, config, source)?;
    Ok(greedy_search(&scorer, effective_len(config, gcfg))?.tokens)
}

pub fn beam_search(params: &Parameters, config: &ModelConfig, source: &Encoding, gcfg: &GenConfig) -> Result<Vec<u32>> {
    Ok(beam_search_hypothesis(params, config, source, gcfg)?.tokens)
}

pub fn beam_search_hypothesis(
    params: &Parameters,
    config: &ModelConfig,
    source: &Encoding,
    gcfg: &GenConfig,
) -> Result<BeamHypothesis> {
    gcfg.validate()?;
    let scorer = ModelScorer::new(params, config, source)?;
    beam_search_with(&scorer, gcfg.beam_size, effective_len(config, gcfg), gcfg.length_penalty)
}

/// One line of a generation output file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratedSummary {
    pub id: String,
    pub summary: String,
    pub token_count: usize,
    pub score: f64,
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Scores come from a fixed table keyed by prefix length and last token.
    struct Table(Vec<Vec<Vec<f64>>>);

    impl NextToken for Table {
        fn log_probs(&self, prefix: &[u32]) -> Result<Vec<f64>> {
            let row = &self.0[prefix.len()];
            let key = prefix.last().map(|&t| t as usize).unwrap_or(0);
            Ok(row[key.min(row.len() - 1)].clone())
        }
    }

    struct Never;

    impl NextToken for Never {
        fn log_probs(&self, _: &[u32]) -> Result<Vec<f64>> {
            Ok(vec![-5.0, -1.0, -3.0, -0.5])
        }
    }

    #[test]
    fn greedy_breaks_ties_by_lowest_id() {
        struct Flat;
        impl NextToken for Flat {
            fn log_probs(&self, _: &[u32]) -> Result<Vec<f64>> {
                Ok(vec![-2.0, -1.0, -1.0, -1.0])
            }
        }
        let h = greedy_search(&Flat, 3).unwrap();
        assert_eq!(h.tokens, vec![1, 1, 1]);
    }

    #[test]
    fn length_cap_without_eos() {
        assert_eq!(greedy_search(&Never, 1).unwrap().tokens.len(), 1);
        let h = beam_search_with(&Never, 2, MAX_OUTPUT_LEN, 0.0).unwrap();
        assert_eq!(h.tokens.len(), MAX_OUTPUT_LEN);
        assert!(h.finished);
    }

    #[test]
    fn beam_stops_at_eos() {
        let table = Table(vec![vec![vec![-0.1, -3.0, -3.0]], vec![vec![-3.0, -3.0, -0.05]; 3]]);
        let h = beam_search_with(&table, 2, 10, 0.0).unwrap();
        assert_eq!(h.tokens, vec![0, EOS_ID]);
        assert!(h.finished);
    }

    #[test]
    fn config_validation() {
        assert!(GenConfig::default().validate().is_ok());
        assert!(GenConfig { beam_size: 0, ..GenConfig::default() }.validate().is_err());
        assert!(GenConfig { max_output_len: 513, ..GenConfig::default() }.validate().is_err());
        assert_eq!(GenConfig::default().beam_size, 2);
    }
}
