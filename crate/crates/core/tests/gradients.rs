mod common;

use common::*;
use persum_core::model::{loss_and_gradients, Example};
use persum_core::params::Parameters;
use persum_core::tokenizer::{Encoding, PAD_ID};

fn worst(reports: &[FdReport]) -> &FdReport {
    reports.iter().max_by(|a, b| a.rel_error.total_cmp(&b.rel_error)).unwrap()
}

#[test]
fn analytic_gradients_match_finite_differences() {
    let config = grad_check_config();
    let params = Parameters::init(&config, 11);
    let example = random_example(&mut rng(5), config.vocab_size, 12, 6);
    let (_, grads) = loss_and_gradients(&params, &config, &example, false).unwrap();
    let reports = finite_difference_check(&params, &config, &example, &grads, 1e-5);
    let w = worst(&reports);
    eprintln!("checked {} entries; worst {} [{}]: analytic {:e} numeric {:e}", reports.len(), w.name, w.index, w.analytic, w.numeric);
    assert!(w.rel_error < 1e-4);
}

#[test]
fn gradients_with_padding_and_extra_globals() {
    let config = grad_check_config();
    let params = Parameters::init(&config, 12);
    let base = random_example(&mut rng(6), config.vocab_size, 9, 4);
    let mut ids = base.source.ids.clone();
    ids.resize(12, PAD_ID);
    let mut source = Encoding::from_ids(ids, &[0, 5]);
    source.attention_mask[9..].fill(0);
    source.length = 9;
    let mut tgt = base.target.ids.clone();
    tgt.resize(7, PAD_ID);
    let mut target = Encoding::from_ids(tgt, &[]);
    target.attention_mask[5..].fill(0);
    target.length = 5;
    let example = Example { source, target };
    let (_, grads) = loss_and_gradients(&params, &config, &example, true).unwrap();
    let reports = finite_difference_check(&params, &config, &example, &grads, 1e-5);
    assert!(worst(&reports).rel_error < 1e-4, "{}", worst(&reports).name);
    // Padded positions contribute nothing to the position tables.
    let pos = grads.enc_positions.slice(ndarray::s![9.., ..]);
    assert!(pos.iter().all(|&g| g == 0.0));
}
