//! Model configuration and learnable weights.

use ndarray::{Array1, Array2, ArrayViewD, ArrayViewMutD};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_enc_layers: usize,
    pub n_dec_layers: usize,
    pub d_ff: usize,
    /// Full sliding-window width (even).
    pub window: usize,
    pub max_enc_len: usize,
    pub max_dec_len: usize,
    pub dropout: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vocab_size: 8000,
            d_model: 64,
            n_heads: 4,
            n_enc_layers: 2,
            n_dec_layers: 2,
            d_ff: 256,
            window: 64,
            max_enc_len: 8192,
            max_dec_len: 512,
            dropout: 0.0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("n_enc_layers", self.n_enc_layers),
            ("n_dec_layers", self.n_dec_layers),
            ("d_ff", self.d_ff),
            ("window", self.window),
            ("max_enc_len", self.max_enc_len),
            ("max_dec_len", self.max_dec_len),
        ];
        for (field, value) in dims {
            if value == 0 {
                return Err(Error::invalid(field, "must be at least 1"));
            }
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::invalid(
                "n_heads",
                format!("d_model {} is not divisible by {} heads", self.d_model, self.n_heads),
            ));
        }
        if !self.window.is_multiple_of(2) || self.window > self.max_enc_len {
            return Err(Error::invalid("window", format!("{} must be even and at most max_enc_len", self.window)));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::invalid("dropout", format!("{} is outside [0, 1)", self.dropout)));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Attention {
    pub wq: Array2<f64>,
    pub wk: Array2<f64>,
    pub wv: Array2<f64>,
    pub wo: Array2<f64>,
    pub bq: Array1<f64>,
    pub bk: Array1<f64>,
    pub bv: Array1<f64>,
    pub bo: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeedForward {
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderLayer {
    pub attn_norm: LayerNorm,
    pub self_attn: Attention,
    pub ff_norm: LayerNorm,
    pub ff: FeedForward,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderLayer {
    pub self_norm: LayerNorm,
    pub self_attn: Attention,
    pub cross_norm: LayerNorm,
    pub cross_attn: Attention,
    pub ff_norm: LayerNorm,
    pub ff: FeedForward,
}

/// All learnable arrays. Gradients use the same type.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameters {
    pub token_embedding: Array2<f64>,
    pub enc_positions: Array2<f64>,
    pub dec_positions: Array2<f64>,
    pub encoder: Vec<EncoderLayer>,
    pub enc_norm: LayerNorm,
    pub decoder: Vec<DecoderLayer>,
    pub dec_norm: LayerNorm,
    pub lm_head: Array2<f64>,
    pub lm_bias: Array1<f64>,
}

struct Init {
    rng: Option<ChaCha8Rng>,
}

impl Init {
    fn matrix(&mut self, rows: usize, cols: usize, std: f64) -> Array2<f64> {
        match &mut self.rng {
            None => Array2::zeros((rows, cols)),
            Some(rng) => {
                let bound = std * 3f64.sqrt();
                Array2::from_shape_fn((rows, cols), |_| rng.random_range(-bound..bound))
            }
        }
    }

    fn ones(&self, n: usize) -> Array1<f64> {
        if self.rng.is_some() {
            Array1::ones(n)
        } else {
            Array1::zeros(n)
        }
    }

    fn norm(&self, d: usize) -> LayerNorm {
        LayerNorm { gamma: self.ones(d), beta: Array1::zeros(d) }
    }

    fn attention(&mut self, d: usize) -> Attention {
        let std = 1.0 / (d as f64).sqrt();
        Attention {
            wq: self.matrix(d, d, std),
            wk: self.matrix(d, d, std),
            wv: self.matrix(d, d, std),
            wo: self.matrix(d, d, std),
            bq: Array1::zeros(d),
            bk: Array1::zeros(d),
            bv: Array1::zeros(d),
            bo: Array1::zeros(d),
        }
    }

    fn ff(&mut self, d: usize, d_ff: usize) -> FeedForward {
        FeedForward {
            w1: self.matrix(d, d_ff, 1.0 / (d as f64).sqrt()),
            b1: Array1::zeros(d_ff),
            w2: self.matrix(d_ff, d, 1.0 / (d_ff as f64).sqrt()),
            b2: Array1::zeros(d),
        }
    }

    fn build(&mut self, c: &ModelConfig) -> Parameters {
        let d = c.d_model;
        let token_embedding = self.matrix(c.vocab_size, d, 1.0);
        let enc_positions = self.matrix(c.max_enc_len, d, 0.1);
        let dec_positions = self.matrix(c.max_dec_len, d, 0.1);
        let encoder = (0..c.n_enc_layers)
            .map(|_| EncoderLayer {
                attn_norm: self.norm(d),
                self_attn: self.attention(d),
                ff_norm: self.norm(d),
                ff: self.ff(d, c.d_ff),
            })
            .collect();
        let decoder = (0..c.n_dec_layers)
            .map(|_| DecoderLayer {
                self_norm: self.norm(d),
                self_attn: self.attention(d),
                cross_norm: self.norm(d),
                cross_attn: self.attention(d),
                ff_norm: self.norm(d),
                ff: self.ff(d, c.d_ff),
            })
            .collect();
        Parameters {
            token_embedding,
            enc_positions,
            dec_positions,
            encoder,
            enc_norm: self.norm(d),
            decoder,
            dec_norm: self.norm(d),
            lm_head: self.matrix(d, c.vocab_size, 1.0 / (d as f64).sqrt()),
            lm_bias: Array1::zeros(c.vocab_size),
        }
    }
}

macro_rules! attention_views {
    ($out:ident, $prefix:expr, $a:expr, $view:ident) => {
        $out.push((format!("{}.wq", $prefix), $a.wq.$view().into_dyn()));
        $out.push((format!("{}.wk", $prefix), $a.wk.$view().into_dyn()));
        $out.push((format!("{}.wv", $prefix), $a.wv.$view().into_dyn()));
        $out.push((format!("{}.wo", $prefix), $a.wo.$view().into_dyn()));
        $out.push((format!("{}.bq", $prefix), $a.bq.$view().into_dyn()));
        $out.push((format!("{}.bk", $prefix), $a.bk.$view().into_dyn()));
        $out.push((format!("{}.bv", $prefix), $a.bv.$view().into_dyn()));
        $out.push((format!("{}.bo", $prefix), $a.bo.$view().into_dyn()));
    };
}

macro_rules! norm_views {
    ($out:ident, $prefix:expr, $n:expr, $view:ident) => {
        $out.push((format!("{}.gamma", $prefix), $n.gamma.$view().into_dyn()));
        $out.push((format!("{}.beta", $prefix), $n.beta.$view().into_dyn()));
    };
}

macro_rules! ff_views {
    ($out:ident, $prefix:expr, $f:expr, $view:ident) => {
        $out.push((format!("{}.w1", $prefix), $f.w1.$view().into_dyn()));
        $out.push((format!("{}.b1", $prefix), $f.b1.$view().into_dyn()));
        $out.push((format!("{}.w2", $prefix), $f.w2.$view().into_dyn()));
        $out.push((format!("{}.b2", $prefix), $f.b2.$view().into_dyn()));
    };
}

macro_rules! all_views {
    ($self:expr, $view:ident, $iter:ident, $ty:ty) => {{
        let p = $self;
        let mut out: Vec<(String, $ty)> = Vec::new();
        out.push(("token_embedding".to_string(), p.token_embedding.$view().into_dyn()));
        out.push(("enc_positions".to_string(), p.enc_positions.$view().into_dyn()));
        out.push(("dec_positions".to_string(), p.dec_positions.$view().into_dyn()));
        for (i, layer) in p.encoder.$iter().enumerate() {
            let prefix = format!("encoder.{i}");
            norm_views!(out, format!("{prefix}.attn_norm"), layer.attn_norm, $view);
            attention_views!(out, format!("{prefix}.self_attn"), layer.self_attn, $view);
            norm_views!(out, format!("{prefix}.ff_norm"), layer.ff_norm, $view);
            ff_views!(out, format!("{prefix}.ff"), layer.ff, $view);
        }
        norm_views!(out, "enc_norm", p.enc_norm, $view);
        for (i, layer) in p.decoder.$iter().enumerate() {
            let prefix = format!("decoder.{i}");
            norm_views!(out, format!("{prefix}.self_norm"), layer.self_norm, $view);
            attention_views!(out, format!("{prefix}.self_attn"), layer.self_attn, $view);
            norm_views!(out, format!("{prefix}.cross_norm"), layer.cross_norm, $view);
            attention_views!(out, format!("{prefix}.cross_attn"), layer.cross_attn, $view);
            norm_views!(out, format!("{prefix}.ff_norm"), layer.ff_norm, $view);
            ff_views!(out, format!("{prefix}.ff"), layer.ff, $view);
        }
        norm_views!(out, "dec_norm", p.dec_norm, $view);
        out.push(("lm_head".to_string(), p.lm_head.$view().into_dyn()));
        out.push(("lm_bias".to_string(), p.lm_bias.$view().into_dyn()));
        out
    }};
}

impl Parameters {
    /// Randomly initialized weights; norms start at identity.
    pub fn init(config: &ModelConfig, seed: u64) -> Self {
        Init { rng: Some(ChaCha8Rng::seed_from_u64(seed)) }.build(config)
    }

    /// Every entry zero, including layer-norm scales.
    pub fn zeros(config: &ModelConfig) -> Self {
        Init { rng: None }.build(config)
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.for_each_mut(|_, mut a| a.fill(0.0));
        z
    }

    /// Named views of every array, in a fixed order.
    pub fn tensors(&self) -> Vec<(String, ArrayViewD<'_, f64>)> {
        all_views!(self, view, iter, ArrayViewD<'_, f64>)
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, ArrayViewMutD<'_, f64>)> {
        all_views!(&mut *self, view_mut, iter_mut, ArrayViewMutD<'_, f64>)
    }

    pub fn for_each_mut(&mut self, mut f: impl FnMut(&str, ArrayViewMutD<'_, f64>)) {
        for (name, view) in self.tensors_mut() {
            f(&name, view);
        }
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    /// `self += alpha * other`, array by array.
    pub fn scaled_add(&mut self, alpha: f64, other: &Parameters) {
        let theirs = other.tensors();
        for ((_, mut mine), (_, t)) in self.tensors_mut().into_iter().zip(theirs) {
            mine.scaled_add(alpha, &t);
        }
    }

    pub fn scale(&mut self, alpha: f64) {
        self.for_each_mut(|_, mut a| a.mapv_inplace(|x| x * alpha));
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|(_, t)| t.iter().all(|x| x.is_finite()))
    }

    /// Checks array shapes against `config`.
    pub fn check_shapes(&self, config: &ModelConfig) -> Result<()> {
        let expected = Parameters::zeros(config);
        let ours = self.tensors();
        let theirs = expected.tensors();
        if ours.len() != theirs.len() {
            return Err(Error::Shape(format!("{} arrays, config implies {}", ours.len(), theirs.len())));
        }
        for ((name, a), (_, b)) in ours.iter().zip(&theirs) {
            if a.shape() != b.shape() {
                return Err(Error::Shape(format!("{name}: {:?}, config implies {:?}", a.shape(), b.shape())));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig {
            vocab_size: 11,
            d_model: 4,
            n_heads: 2,
            n_enc_layers: 2,
            n_dec_layers: 1,
            d_ff: 6,
            window: 2,
            max_enc_len: 8,
            max_dec_len: 5,
            dropout: 0.0,
        }
    }

    #[test]
    fn config_validation() {
        assert!(tiny().validate().is_ok());
        assert!(ModelConfig::default().validate().is_ok());
        assert!(ModelConfig { n_heads: 3, ..tiny() }.validate().is_err());
        assert!(ModelConfig { window: 3, ..tiny() }.validate().is_err());
        assert!(ModelConfig { window: 10, ..tiny() }.validate().is_err());
        assert!(ModelConfig { d_ff: 0, ..tiny() }.validate().is_err());
        assert!(ModelConfig { dropout: 1.0, ..tiny() }.validate().is_err());
    }

    #[test]
    fn names_are_unique_and_shapes_consistent() {
        let p = Parameters::init(&tiny(), 1);
        let names: std::collections::HashSet<_> = p.tensors().into_iter().map(|(n, _)| n).collect();
        assert_eq!(names.len(), p.tensors().len());
        assert!(p.check_shapes(&tiny()).is_ok());
        assert!(p.check_shapes(&ModelConfig { d_ff: 7, ..tiny() }).is_err());
        assert!(p.is_finite());
    }

    #[test]
    fn init_is_seeded() {
        assert_eq!(Parameters::init(&tiny(), 5), Parameters::init(&tiny(), 5));
        assert_ne!(Parameters::init(&tiny(), 5), Parameters::init(&tiny(), 6));
        let z = Parameters::zeros(&tiny());
        assert!(z.tensors().iter().all(|(_, t)| t.iter().all(|&x| x == 0.0)));
    }

    #[test]
    fn scaled_add_touches_every_array() {
        let mut a = Parameters::zeros(&tiny());
        let mut ones = Parameters::zeros(&tiny());
        ones.for_each_mut(|_, mut t| t.fill(1.0));
        a.scaled_add(2.0, &ones);
        assert!(a.tensors().iter().all(|(_, t)| t.iter().all(|&x| x == 2.0)));
    }
}
