#![allow(dead_code)]

use persum_core::model::{example_loss, Example};
use persum_core::params::{ModelConfig, Parameters};
use persum_core::tokenizer::{Encoding, EOS_ID, SOS_ID};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn grad_check_config() -> ModelConfig {
    ModelConfig {
        vocab_size: 50,
        d_model: 8,
        n_heads: 2,
        n_enc_layers: 1,
        n_dec_layers: 1,
        d_ff: 16,
        window: 4,
        max_enc_len: 12,
        max_dec_len: 6,
        dropout: 0.0,
    }
}

/// Source of length `n` and target giving `m` decoder positions.
pub fn random_example(rng: &mut ChaCha8Rng, vocab: usize, n: usize, m: usize) -> Example {
    let mut src = vec![SOS_ID];
    src.extend((0..n - 2).map(|_| rng.random_range(4..vocab as u32)));
    src.push(EOS_ID);
    let mut tgt = vec![SOS_ID];
    tgt.extend((0..m - 1).map(|_| rng.random_range(4..vocab as u32)));
    tgt.push(EOS_ID);
    Example { source: Encoding::from_ids(src, &[0]), target: Encoding::from_ids(tgt, &[]) }
}

pub struct FdReport {
    pub name: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

/// Relative error with a floor on the denominator so that entries whose
/// true gradient is ~0 are judged on absolute error instead.
pub fn rel_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Central differences over every parameter entry.
pub fn finite_difference_check(params: &Parameters, config: &ModelConfig, example: &Example, analytic: &Parameters, h: f64) -> Vec<FdReport> {
    let analytic: Vec<(String, Vec<f64>)> =
        analytic.tensors().into_iter().map(|(n, t)| (n, t.iter().copied().collect())).collect();
    let mut reports = Vec::new();
    let mut work = params.clone();
    for (t_idx, (name, grads)) in analytic.iter().enumerate() {
        for (i, &a) in grads.iter().enumerate() {
            let orig = {
                let mut views = work.tensors_mut();
                let v = views[t_idx].1.as_slice_mut().unwrap();
                let o = v[i];
                v[i] = o + h;
                o
            };
            let plus = example_loss(&work, config, example).unwrap();
            work.tensors_mut()[t_idx].1.as_slice_mut().unwrap()[i] = orig - h;
            let minus = example_loss(&work, config, example).unwrap();
            work.tensors_mut()[t_idx].1.as_slice_mut().unwrap()[i] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            reports.push(FdReport { name: name.clone(), index: i, analytic: a, numeric, rel_error: rel_error(a, numeric) });
        }
    }
    reports
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
