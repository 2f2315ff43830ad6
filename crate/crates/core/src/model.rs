//! Encoder-decoder with sliding-window encoder self-attention.
//!
//! Pre-layer-norm blocks throughout. The encoder uses windowed attention
//! with global tokens; the decoder uses causal self-attention and full
//! cross-attention over unpadded encoder states. Gradients are computed by
//! hand-written backward passes, optionally recomputing each layer from its
//! stored input instead of keeping every layer's activations alive.

use ndarray::{s, Array2, Axis};

use crate::activations::Charge;
use crate::attention::KeyPattern;
use crate::error::{Error, Result, Stage};
use crate::layers::{
    apply_mask, decoder_layer, decoder_layer_backward, encoder_layer, encoder_layer_backward, final_norm,
    final_norm_backward, linear, site, DecoderLayerCache, Dropout, EncoderLayerCache,
};
use crate::params::{ModelConfig, Parameters};
use crate::tokenizer::Encoding;

/// Final encoder states plus the key mask the decoder needs.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderOutput {
    pub states: Array2<f64>,
    pub key_mask: Vec<bool>,
}

/// One training pair. The target holds `SOS y EOS` (plus padding); the
/// decoder reads `target[..len-1]` and predicts `target[1..]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub source: Encoding,
    pub target: Encoding,
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct StepOptions {
    pub checkpointing: bool,
    /// Seed for dropout masks; dropout is off when `None` or when the
    /// configured rate is zero.
    pub dropout_seed: Option<u64>,
}

struct EncoderMasks {
    key_mask: Vec<bool>,
    global: Vec<bool>,
    global_idx: Vec<usize>,
    half: usize,
}

impl EncoderMasks {
    fn new(enc: &Encoding, window: usize) -> Self {
        let key_mask: Vec<bool> = enc.attention_mask.iter().map(|&m| m != 0).collect();
        let global: Vec<bool> = enc.global_mask.iter().zip(&key_mask).map(|(&g, &k)| g != 0 && k).collect();
        let global_idx = (0..global.len()).filter(|&i| global[i]).collect();
        EncoderMasks { key_mask, global, global_idx, half: window / 2 }
    }

    fn pattern(&self) -> KeyPattern<'_> {
        KeyPattern::Sliding {
            half: self.half,
            key_mask: &self.key_mask,
            global: &self.global,
            global_idx: &self.global_idx,
            causal: false,
        }
    }
}

fn check_ids(ids: &[u32], vocab_size: usize) -> Result<()> {
    match ids.iter().find(|&&id| id as usize >= vocab_size) {
        Some(&id) => Err(Error::UnknownId { id, vocab_size }),
        None => Ok(()),
    }
}

fn check_encoding(enc: &Encoding, config: &ModelConfig) -> Result<()> {
    if enc.ids.len() > config.max_enc_len {
        return Err(Error::TooLong { len: enc.ids.len(), max: config.max_enc_len });
    }
    if enc.ids.is_empty() {
        return Err(Error::Empty("source sequence"));
    }
    if enc.attention_mask.len() != enc.ids.len() || enc.global_mask.len() != enc.ids.len() {
        return Err(Error::Shape("encoding masks differ in length from ids".into()));
    }
    check_ids(&enc.ids, config.vocab_size)
}

fn check_finite(x: &Array2<f64>, stage: Stage) -> Result<()> {
    if x.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { stage })
    }
}

fn embed(params: &Parameters, positions: &Array2<f64>, ids: &[u32]) -> Array2<f64> {
    let mut x = positions.slice(s![..ids.len(), ..]).to_owned();
    for (mut row, &id) in x.axis_iter_mut(Axis(0)).zip(ids) {
        row += &params.token_embedding.row(id as usize);
    }
    x
}

fn embed_backward(grad: &mut Parameters, positions: PositionTable, ids: &[u32], dx: &Array2<f64>) {
    for (row, &id) in dx.axis_iter(Axis(0)).zip(ids) {
        let mut target = grad.token_embedding.row_mut(id as usize);
        target += &row;
    }
    let table = match positions {
        PositionTable::Encoder => &mut grad.enc_positions,
        PositionTable::Decoder => &mut grad.dec_positions,
    };
    let mut rows = table.slice_mut(s![..ids.len(), ..]);
    rows += dx;
}

#[derive(Clone, Copy)]
enum PositionTable {
    Encoder,
    Decoder,
}

/// Runs the encoder stack and returns final-layer states `[n x d_model]`.
pub fn encode_document(params: &Parameters, config: &ModelConfig, enc: &Encoding) -> Result<EncoderOutput> {
    check_encoding(enc, config)?;
    let masks = EncoderMasks::new(enc, config.window);
    let pattern = masks.pattern();
    let mut x = embed(params, &params.enc_positions, &enc.ids);
    check_finite(&x, Stage::Embedding)?;
    for (l, layer) in params.encoder.iter().enumerate() {
        x = encoder_layer(layer, &x, &pattern, config.n_heads, None).0;
        check_finite(&x, Stage::Encoder(l))?;
    }
    let (states, _) = final_norm(&params.enc_norm, &x);
    Ok(EncoderOutput { states, key_mask: masks.key_mask })
}

fn check_decoder_input(ids: &[u32], config: &ModelConfig) -> Result<()> {
    if ids.len() > config.max_dec_len {
        return Err(Error::TooLong { len: ids.len(), max: config.max_dec_len });
    }
    if ids.is_empty() {
        return Err(Error::Empty("decoder input"));
    }
    check_ids(ids, config.vocab_size)
}

fn decoder_hidden(params: &Parameters, config: &ModelConfig, memory: &EncoderOutput, ids: &[u32]) -> Result<Array2<f64>> {
    check_decoder_input(ids, config)?;
    let self_mask = vec![true; ids.len()];
    let self_pattern = KeyPattern::Dense { key_mask: &self_mask, causal: true };
    let cross_pattern = KeyPattern::Dense { key_mask: &memory.key_mask, causal: false };
    let mut y = embed(params, &params.dec_positions, ids);
    for (l, layer) in params.decoder.iter().enumerate() {
        y = decoder_layer(layer, &y, &memory.states, &self_pattern, &cross_pattern, config.n_heads, None).0;
        check_finite(&y, Stage::Decoder(l))?;
    }
    Ok(final_norm(&params.dec_norm, &y).0)
}

/// Logits `[m x vocab]` for decoder inputs `target_ids` (teacher forcing).
pub fn decoder_forward(
    params: &Parameters,
    config: &ModelConfig,
    memory: &EncoderOutput,
    target_ids: &[u32],
) -> Result<Array2<f64>> {
    let hidden = decoder_hidden(params, config, memory, target_ids)?;
    let logits = linear(hidden.view(), &params.lm_head, &params.lm_bias);
    check_finite(&logits, Stage::Output)?;
    Ok(logits)
}

pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let log_total = logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln() + max;
    logits.iter().map(|l| l - log_total).collect()
}

/// Log-probabilities of the next token after `prefix` (which starts with SOS).
pub fn next_token_log_probs(
    params: &Parameters,
    config: &ModelConfig,
    memory: &EncoderOutput,
    prefix: &[u32],
) -> Result<Vec<f64>> {
    let hidden = decoder_hidden(params, config, memory, prefix)?;
    let last = hidden.slice(s![hidden.nrows() - 1..hidden.nrows(), ..]);
    let logits = linear(last, &params.lm_head, &params.lm_bias);
    check_finite(&logits, Stage::Output)?;
    Ok(log_softmax(logits.as_slice().expect("row-major logits")))
}

fn split_target(target: &Encoding, config: &ModelConfig) -> Result<(Vec<u32>, Vec<u32>, Vec<bool>)> {
    if target.ids.len() < 2 {
        return Err(Error::Shape("target needs at least SOS and EOS".into()));
    }
    let m = target.ids.len() - 1;
    let inputs = target.ids[..m].to_vec();
    check_decoder_input(&inputs, config)?;
    let labels = target.ids[1..].to_vec();
    check_ids(&labels, config.vocab_size)?;
    let label_mask: Vec<bool> = target.attention_mask[1..].iter().map(|&x| x != 0).collect();
    if !label_mask.iter().any(|&b| b) {
        return Err(Error::Empty("target labels"));
    }
    Ok((inputs, labels, label_mask))
}

/// Mean token cross-entropy of one example, forward only.
pub fn example_loss(params: &Parameters, config: &ModelConfig, example: &Example) -> Result<f64> {
    let (nll, count) = example_nll(params, config, example)?;
    Ok(nll / count as f64)
}

/// Summed negative log-likelihood over real target tokens, and their count.
pub fn example_nll(params: &Parameters, config: &ModelConfig, example: &Example) -> Result<(f64, usize)> {
    let (nll, count, _) = run(params, config, example, StepOptions::default(), false)?;
    Ok((nll, count))
}

/// Teacher-forced loss and exact gradients for one example, no dropout.
pub fn loss_and_gradients(
    params: &Parameters,
    config: &ModelConfig,
    example: &Example,
    checkpointing: bool,
) -> Result<(f64, Parameters)> {
    loss_and_gradients_with(params, config, example, StepOptions { checkpointing, dropout_seed: None })
}

pub fn loss_and_gradients_with(
    params: &Parameters,
    config: &ModelConfig,
    example: &Example,
    options: StepOptions,
) -> Result<(f64, Parameters)> {
    let (nll, count, grads) = run(params, config, example, options, true)?;
    Ok((nll / count as f64, grads.expect("gradients requested")))
}

enum Saved<C> {
    Cache(C),
    Input(Array2<f64>, Charge),
}

fn run(
    params: &Parameters,
    config: &ModelConfig,
    example: &Example,
    options: StepOptions,
    want_grads: bool,
) -> Result<(f64, usize, Option<Parameters>)> {
    check_encoding(&example.source, config)?;
    let (dec_in, labels, label_mask) = split_target(&example.target, config)?;
    let dropout = match options.dropout_seed {
        Some(seed) if config.dropout > 0.0 && want_grads => Some(Dropout { rate: config.dropout, seed }),
        _ => None,
    };
    let checkpointing = options.checkpointing && want_grads;
    let n_heads = config.n_heads;

    // Encoder.
    let masks = EncoderMasks::new(&example.source, config.window);
    let enc_pattern = masks.pattern();
    let mut x = embed(params, &params.enc_positions, &example.source.ids);
    let enc_emb_mask = dropout.and_then(|d| d.mask(site(0, 0, 0), x.dim()));
    apply_mask(&mut x, &enc_emb_mask);
    check_finite(&x, Stage::Embedding)?;
    let mut enc_saved = Vec::with_capacity(params.encoder.len());
    for (l, layer) in params.encoder.iter().enumerate() {
        let layer_dropout = dropout.map(|d| (d, l));
        let input = if checkpointing { Some(x.clone()) } else { None };
        let (next, cache) = encoder_layer(layer, &x, &enc_pattern, n_heads, layer_dropout);
        if want_grads {
            enc_saved.push(match input {
                Some(inp) => {
                    drop(cache);
                    let charge = Charge::new(inp.len());
                    Saved::Input(inp, charge)
                }
                None => Saved::Cache(cache),
            });
        }
        x = next;
        check_finite(&x, Stage::Encoder(l))?;
    }
    let (memory, enc_norm_cache) = final_norm(&params.enc_norm, &x);
    drop(x);

    // Decoder.
    let self_mask: Vec<bool> = example.target.attention_mask[..dec_in.len()].iter().map(|&m| m != 0).collect();
    let self_pattern = KeyPattern::Dense { key_mask: &self_mask, causal: true };
    let cross_pattern = KeyPattern::Dense { key_mask: &masks.key_mask, causal: false };
    let mut y = embed(params, &params.dec_positions, &dec_in);
    let dec_emb_mask = dropout.and_then(|d| d.mask(site(0, 0, 1), y.dim()));
    apply_mask(&mut y, &dec_emb_mask);
    let mut dec_saved = Vec::with_capacity(params.decoder.len());
    for (l, layer) in params.decoder.iter().enumerate() {
        let layer_dropout = dropout.map(|d| (d, l));
        let input = if checkpointing { Some(y.clone()) } else { None };
        let (next, cache) = decoder_layer(layer, &y, &memory, &self_pattern, &cross_pattern, n_heads, layer_dropout);
        if want_grads {
            dec_saved.push(match input {
                Some(inp) => {
                    drop(cache);
                    let charge = Charge::new(inp.len());
                    Saved::Input(inp, charge)
                }
                None => Saved::Cache(cache),
            });
        }
        y = next;
        check_finite(&y, Stage::Decoder(l))?;
    }
    let (hidden, dec_norm_cache) = final_norm(&params.dec_norm, &y);
    drop(y);
    let logits = linear(hidden.view(), &params.lm_head, &params.lm_bias);
    let _logits_charge = Charge::new(logits.len());
    check_finite(&logits, Stage::Output)?;

    // Cross-entropy over unmasked labels.
    let n_labels = label_mask.iter().filter(|&&b| b).count();
    let count = n_labels as f64;
    let mut nll = 0.0;
    let mut d_logits = Array2::zeros(logits.raw_dim());
    for (t, ((row, &label), &real)) in logits.axis_iter(Axis(0)).zip(&labels).zip(&label_mask).enumerate() {
        if !real {
            continue;
        }
        let logp = log_softmax(row.as_slice().expect("row-major logits"));
        nll -= logp[label as usize];
        let mut g = d_logits.row_mut(t);
        for (gv, lp) in g.iter_mut().zip(&logp) {
            *gv = lp.exp() / count;
        }
        g[label as usize] -= 1.0 / count;
    }
    if !nll.is_finite() {
        return Err(Error::NonFinite { stage: Stage::Output });
    }
    if !want_grads {
        return Ok((nll, n_labels, None));
    }

    // Backward.
    let mut grads = params.zeros_like();
    grads.lm_head += &hidden.t().dot(&d_logits);
    grads.lm_bias += &d_logits.sum_axis(Axis(0));
    let d_hidden = d_logits.dot(&params.lm_head.t());
    drop(d_logits);
    let mut dy = final_norm_backward(&params.dec_norm, &dec_norm_cache, &d_hidden, &mut grads.dec_norm);
    drop(dec_norm_cache);

    let mut d_memory = Array2::zeros(memory.raw_dim());
    for l in (0..params.decoder.len()).rev() {
        let layer = &params.decoder[l];
        let cache: DecoderLayerCache = match dec_saved.pop().expect("one entry per layer") {
            Saved::Cache(c) => c,
            Saved::Input(inp, _charge) => {
                decoder_layer(layer, &inp, &memory, &self_pattern, &cross_pattern, n_heads, dropout.map(|d| (d, l))).1
            }
        };
        dy = decoder_layer_backward(layer, &memory, &cache, dy, &mut grads.decoder[l], &mut d_memory);
    }
    apply_mask(&mut dy, &dec_emb_mask);
    embed_backward(&mut grads, PositionTable::Decoder, &dec_in, &dy);

    let mut dx = final_norm_backward(&params.enc_norm, &enc_norm_cache, &d_memory, &mut grads.enc_norm);
    drop(enc_norm_cache);
    for l in (0..params.encoder.len()).rev() {
        let layer = &params.encoder[l];
        let cache: EncoderLayerCache = match enc_saved.pop().expect("one entry per layer") {
            Saved::Cache(c) => c,
            Saved::Input(inp, _charge) => encoder_layer(layer, &inp, &enc_pattern, n_heads, dropout.map(|d| (d, l))).1,
        };
        dx = encoder_layer_backward(layer, &cache, dx, &mut grads.encoder[l]);
    }
    apply_mask(&mut dx, &enc_emb_mask);
    embed_backward(&mut grads, PositionTable::Encoder, &example.source.ids, &dx);
    Ok((nll, n_labels, Some(grads)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenizer::{EOS_ID, PAD_ID, SOS_ID};

    fn tiny() -> ModelConfig {
        ModelConfig {
            vocab_size: 13,
            d_model: 8,
            n_heads: 2,
            n_enc_layers: 2,
            n_dec_layers: 2,
            d_ff: 12,
            window: 2,
            max_enc_len: 16,
            max_dec_len: 8,
            dropout: 0.0,
        }
    }

    fn example() -> Example {
        Example {
            source: Encoding::from_ids(vec![SOS_ID, 5, 6, 7, 8, 9, EOS_ID], &[0]),
            target: Encoding::from_ids(vec![SOS_ID, 10, 11, EOS_ID], &[]),
        }
    }

    #[test]
    fn encoder_output_shape() {
        let c = tiny();
        let p = Parameters::init(&c, 3);
        let out = encode_document(&p, &c, &example().source).unwrap();
        assert_eq!(out.states.dim(), (7, 8));
    }

    #[test]
    fn too_long_inputs_are_rejected() {
        let c = tiny();
        let p = Parameters::init(&c, 3);
        let long = Encoding::from_ids(vec![5; 17], &[]);
        assert!(matches!(encode_document(&p, &c, &long), Err(Error::TooLong { .. })));
        let mem = encode_document(&p, &c, &example().source).unwrap();
        assert!(matches!(decoder_forward(&p, &c, &mem, &[5; 9]), Err(Error::TooLong { .. })));
        assert!(decoder_forward(&p, &c, &mem, &[5; 8]).is_ok());
    }

    #[test]
    fn zero_parameters_give_uniform_loss() {
        let c = tiny();
        let p = Parameters::zeros(&c);
        let (loss, _) = loss_and_gradients(&p, &c, &example(), false).unwrap();
        assert!((loss - (c.vocab_size as f64).ln()).abs() < 1e-12);
        let mem = encode_document(&p, &c, &example().source).unwrap();
        let logits = decoder_forward(&p, &c, &mem, &[SOS_ID]).unwrap();
        assert_eq!(logits.dim(), (1, c.vocab_size));
        assert!(logits.iter().all(|&v| v == logits[[0, 0]]));
    }

    #[test]
    fn forward_loss_matches_gradient_pass() {
        let c = tiny();
        let p = Parameters::init(&c, 4);
        let a = example_loss(&p, &c, &example()).unwrap();
        let (b, _) = loss_and_gradients(&p, &c, &example(), true).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn padded_target_positions_do_not_count() {
        let c = tiny();
        let p = Parameters::init(&c, 4);
        let base = example();
        let mut padded = base.clone();
        padded.target.ids.extend([PAD_ID, PAD_ID]);
        padded.target.attention_mask.extend([0, 0]);
        padded.target.global_mask.extend([0, 0]);
        let a = example_loss(&p, &c, &base).unwrap();
        let b = example_loss(&p, &c, &padded).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn non_finite_weights_report_stage() {
        let c = tiny();
        let mut p = Parameters::init(&c, 4);
        p.encoder[1].ff.w1[[0, 0]] = f64::NAN;
        match loss_and_gradients(&p, &c, &example(), false) {
            Err(Error::NonFinite { stage }) => assert_eq!(stage, Stage::Encoder(1)),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn dropout_changes_loss_but_checkpointing_reproduces_it() {
        let c = ModelConfig { dropout: 0.3, ..tiny() };
        let p = Parameters::init(&c, 4);
        let plain = example_loss(&p, &c, &example()).unwrap();
        let opts = StepOptions { checkpointing: false, dropout_seed: Some(17) };
        let (a, ga) = loss_and_gradients_with(&p, &c, &example(), opts).unwrap();
        let (b, gb) = loss_and_gradients_with(&p, &c, &example(), StepOptions { checkpointing: true, ..opts }).unwrap();
        assert_ne!(a, plain);
        assert_eq!(a, b);
        assert_eq!(ga, gb);
    }
}
