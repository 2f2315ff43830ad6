//! Forward and backward passes of the transformer building blocks.
//!
//! Each `*_forward` returns its output plus a cache holding exactly what the
//! matching `*_backward` needs. Backward functions accumulate parameter
//! gradients into a same-shaped struct and return the input gradient.

use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::activations::Charge;
use crate::attention::{attend_backward, attend_forward, head_cols, KeyPattern, SparseProbs};
use crate::params::{Attention, FeedForward, LayerNorm};

pub const LN_EPS: f64 = 1e-5;

pub(crate) fn linear(x: ArrayView2<f64>, w: &Array2<f64>, b: &Array1<f64>) -> Array2<f64> {
    let mut y = x.dot(w);
    y += b;
    y
}

/// Accumulates weight and bias gradients; returns the input gradient.
fn linear_backward(
    x: ArrayView2<f64>,
    w: &Array2<f64>,
    dy: &Array2<f64>,
    dw: &mut Array2<f64>,
    db: &mut Array1<f64>,
) -> Array2<f64> {
    ndarray::linalg::general_mat_mul(1.0, &x.t(), dy, 1.0, dw);
    *db += &dy.sum_axis(Axis(0));
    dy.dot(&w.t())
}

pub(crate) struct NormCache {
    xhat: Array2<f64>,
    rstd: Array1<f64>,
}

impl NormCache {
    fn elements(&self) -> usize {
        self.xhat.len() + self.rstd.len()
    }
}

pub(crate) fn layer_norm(p: &LayerNorm, x: &Array2<f64>) -> (Array2<f64>, NormCache) {
    let d = x.ncols() as f64;
    let mut xhat = x.clone();
    let mut rstd = Array1::zeros(x.nrows());
    for (mut row, r) in xhat.axis_iter_mut(Axis(0)).zip(rstd.iter_mut()) {
        let mean = row.sum() / d;
        row -= mean;
        let var = row.iter().map(|v| v * v).sum::<f64>() / d;
        *r = 1.0 / (var + LN_EPS).sqrt();
        row *= *r;
    }
    let mut y = &xhat * &p.gamma;
    y += &p.beta;
    (y, NormCache { xhat, rstd })
}

fn layer_norm_backward(p: &LayerNorm, cache: &NormCache, dy: &Array2<f64>, grad: &mut LayerNorm) -> Array2<f64> {
    grad.gamma += &(dy * &cache.xhat).sum_axis(Axis(0));
    grad.beta += &dy.sum_axis(Axis(0));
    let d = dy.ncols() as f64;
    let mut dx = dy * &p.gamma;
    for ((mut row, xhat), &r) in dx.axis_iter_mut(Axis(0)).zip(cache.xhat.axis_iter(Axis(0))).zip(&cache.rstd) {
        let mean_g = row.sum() / d;
        let mean_gx = row.iter().zip(xhat.iter()).map(|(g, x)| g * x).sum::<f64>() / d;
        Zip::from(&mut row).and(&xhat).for_each(|g, &x| *g = r * (*g - mean_g - x * mean_gx));
    }
    dx
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)

pub(crate) fn gelu(x: f64) -> f64 {
    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * x * (1.0 + t)
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

pub(crate) struct FfCache {
    pre: Array2<f64>,
    act: Array2<f64>,
}

pub(crate) fn feed_forward(p: &FeedForward, x: ArrayView2<f64>) -> (Array2<f64>, FfCache) {
    let pre = linear(x, &p.w1, &p.b1);
    let act = pre.mapv(gelu);
    let y = linear(act.view(), &p.w2, &p.b2);
    (y, FfCache { pre, act })
}

fn feed_forward_backward(p: &FeedForward, x: ArrayView2<f64>, cache: &FfCache, dy: &Array2<f64>, grad: &mut FeedForward) -> Array2<f64> {
    let mut d_act = linear_backward(cache.act.view(), &p.w2, dy, &mut grad.w2, &mut grad.b2);
    Zip::from(&mut d_act).and(&cache.pre).for_each(|g, &h| *g *= gelu_grad(h));
    linear_backward(x, &p.w1, &d_act, &mut grad.w1, &mut grad.b1)
}

pub(crate) struct AttnCache {
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    ctx: Array2<f64>,
    heads: Vec<SparseProbs>,
}

impl AttnCache {
    fn elements(&self) -> usize {
        self.q.len() + self.k.len() + self.v.len() + self.ctx.len() + self.heads.iter().map(SparseProbs::stored).sum::<usize>()
    }
}

/// Multi-head attention: queries from `xq`, keys and values from `xkv`.
pub(crate) fn multi_head_attention(
    p: &Attention,
    xq: ArrayView2<f64>,
    xkv: ArrayView2<f64>,
    pattern: &KeyPattern,
    n_heads: usize,
) -> (Array2<f64>, AttnCache) {
    let q = linear(xq, &p.wq, &p.bq);
    let k = linear(xkv, &p.wk, &p.bk);
    let v = linear(xkv, &p.wv, &p.bv);
    let head_dim = q.ncols() / n_heads;
    let mut ctx = Array2::zeros(q.raw_dim());
    let heads = (0..n_heads)
        .map(|h| {
            let cols = head_cols(h, head_dim);
            attend_forward(q.slice(cols), k.slice(cols), v.slice(cols), pattern, ctx.slice_mut(cols))
        })
        .collect();
    let out = linear(ctx.view(), &p.wo, &p.bo);
    (out, AttnCache { q, k, v, ctx, heads })
}

/// Returns gradients for the query input and the key/value input.
fn multi_head_attention_backward(
    p: &Attention,
    xq: ArrayView2<f64>,
    xkv: ArrayView2<f64>,
    cache: &AttnCache,
    dy: &Array2<f64>,
    grad: &mut Attention,
) -> (Array2<f64>, Array2<f64>) {
    let d_ctx = linear_backward(cache.ctx.view(), &p.wo, dy, &mut grad.wo, &mut grad.bo);
    let head_dim = cache.q.ncols() / cache.heads.len();
    let mut dq = Array2::zeros(cache.q.raw_dim());
    let mut dk = Array2::zeros(cache.k.raw_dim());
    let mut dv = Array2::zeros(cache.v.raw_dim());
    for (h, probs) in cache.heads.iter().enumerate() {
        let cols = head_cols(h, head_dim);
        let (gq, gk, gv) = attend_backward(
            cache.q.slice(cols),
            cache.k.slice(cols),
            cache.v.slice(cols),
            probs,
            d_ctx.slice(cols),
        );
        dq.slice_mut(cols).assign(&gq);
        dk.slice_mut(cols).assign(&gk);
        dv.slice_mut(cols).assign(&gv);
    }
    let dxq = linear_backward(xq, &p.wq, &dq, &mut grad.wq, &mut grad.bq);
    let mut dxkv = linear_backward(xkv, &p.wk, &dk, &mut grad.wk, &mut grad.bk);
    dxkv += &linear_backward(xkv, &p.wv, &dv, &mut grad.wv, &mut grad.bv);
    (dxq, dxkv)
}

/// Inverted dropout with masks derived from `(seed, site)`, so recomputing
/// a layer reproduces the same mask.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Dropout {
    pub rate: f64,
    pub seed: u64,
}

impl Dropout {
    pub(crate) fn mask(&self, site: u64, shape: (usize, usize)) -> Option<Array2<f64>> {
        if self.rate <= 0.0 {
            return None;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ site.wrapping_mul(0x9e37_79b9_7f4a_7c15));
        let keep = 1.0 - self.rate;
        Some(Array2::from_shape_fn(shape, |_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 }))
    }
}

pub(crate) fn apply_mask(x: &mut Array2<f64>, mask: &Option<Array2<f64>>) {
    if let Some(m) = mask {
        *x *= m;
    }
}

/// Site ids for dropout masks: unique per (stack, layer, position in layer).
pub(crate) fn site(stack: u64, layer: usize, slot: u64) -> u64 {
    (stack << 40) | ((layer as u64) << 8) | slot
}

pub(crate) struct EncoderLayerCache {
    attn_norm: NormCache,
    h1: Array2<f64>,
    attn: AttnCache,
    drop_attn: Option<Array2<f64>>,
    ff_norm: NormCache,
    h2: Array2<f64>,
    ff: FfCache,
    drop_ff: Option<Array2<f64>>,
    _charge: Charge,
}

pub(crate) fn encoder_layer(
    p: &crate::params::EncoderLayer,
    x: &Array2<f64>,
    pattern: &KeyPattern,
    n_heads: usize,
    dropout: Option<(Dropout, usize)>,
) -> (Array2<f64>, EncoderLayerCache) {
    let (h1, attn_norm) = layer_norm(&p.attn_norm, x);
    let (mut a, attn) = multi_head_attention(&p.self_attn, h1.view(), h1.view(), pattern, n_heads);
    let drop_attn = dropout.and_then(|(d, l)| d.mask(site(1, l, 0), a.dim()));
    apply_mask(&mut a, &drop_attn);
    let x1 = x + &a;
    let (h2, ff_norm) = layer_norm(&p.ff_norm, &x1);
    let (mut f, ff) = feed_forward(&p.ff, h2.view());
    let drop_ff = dropout.and_then(|(d, l)| d.mask(site(1, l, 1), f.dim()));
    apply_mask(&mut f, &drop_ff);
    let out = x1 + &f;
    let elements = attn_norm.elements()
        + h1.len()
        + attn.elements()
        + ff_norm.elements()
        + h2.len()
        + ff.pre.len()
        + ff.act.len()
        + drop_attn.as_ref().map_or(0, |m| m.len())
        + drop_ff.as_ref().map_or(0, |m| m.len());
    let cache = EncoderLayerCache { attn_norm, h1, attn, drop_attn, ff_norm, h2, ff, drop_ff, _charge: Charge::new(elements) };
    (out, cache)
}

pub(crate) fn encoder_layer_backward(
    p: &crate::params::EncoderLayer,
    cache: &EncoderLayerCache,
    d_out: Array2<f64>,
    grad: &mut crate::params::EncoderLayer,
) -> Array2<f64> {
    let mut df = d_out.clone();
    apply_mask(&mut df, &cache.drop_ff);
    let dh2 = feed_forward_backward(&p.ff, cache.h2.view(), &cache.ff, &df, &mut grad.ff);
    let mut dx1 = d_out;
    dx1 += &layer_norm_backward(&p.ff_norm, &cache.ff_norm, &dh2, &mut grad.ff_norm);

    let mut da = dx1.clone();
    apply_mask(&mut da, &cache.drop_attn);
    let (dq_in, dkv_in) = multi_head_attention_backward(&p.self_attn, cache.h1.view(), cache.h1.view(), &cache.attn, &da, &mut grad.self_attn);
    let dh1 = dq_in + &dkv_in;
    let mut dx = dx1;
    dx += &layer_norm_backward(&p.attn_norm, &cache.attn_norm, &dh1, &mut grad.attn_norm);
    dx
}

pub(crate) struct DecoderLayerCache {
    self_norm: NormCache,
    h1: Array2<f64>,
    self_attn: AttnCache,
    drop_self: Option<Array2<f64>>,
    cross_norm: NormCache,
    h2: Array2<f64>,
    cross_attn: AttnCache,
    drop_cross: Option<Array2<f64>>,
    ff_norm: NormCache,
    h3: Array2<f64>,
    ff: FfCache,
    drop_ff: Option<Array2<f64>>,
    _charge: Charge,
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn decoder_layer(
    p: &crate::params::DecoderLayer,
    x: &Array2<f64>,
    memory: &Array2<f64>,
    self_pattern: &KeyPattern,
    cross_pattern: &KeyPattern,
    n_heads: usize,
    dropout: Option<(Dropout, usize)>,
) -> (Array2<f64>, DecoderLayerCache) {
    let (h1, self_norm) = layer_norm(&p.self_norm, x);
    let (mut a, self_attn) = multi_head_attention(&p.self_attn, h1.view(), h1.view(), self_pattern, n_heads);
    let drop_self = dropout.and_then(|(d, l)| d.mask(site(2, l, 0), a.dim()));
    apply_mask(&mut a, &drop_self);
    let x1 = x + &a;

    let (h2, cross_norm) = layer_norm(&p.cross_norm, &x1);
    let (mut c, cross_attn) = multi_head_attention(&p.cross_attn, h2.view(), memory.view(), cross_pattern, n_heads);
    let drop_cross = dropout.and_then(|(d, l)| d.mask(site(2, l, 1), c.dim()));
    apply_mask(&mut c, &drop_cross);
    let x2 = x1 + &c;

    let (h3, ff_norm) = layer_norm(&p.ff_norm, &x2);
    let (mut f, ff) = feed_forward(&p.ff, h3.view());
    let drop_ff = dropout.and_then(|(d, l)| d.mask(site(2, l, 2), f.dim()));
    apply_mask(&mut f, &drop_ff);
    let out = x2 + &f;

    let masks = [&drop_self, &drop_cross, &drop_ff].iter().map(|m| m.as_ref().map_or(0, |m| m.len())).sum::<usize>();
    let elements = self_norm.elements()
        + h1.len()
        + self_attn.elements()
        + cross_norm.elements()
        + h2.len()
        + cross_attn.elements()
        + ff_norm.elements()
        + h3.len()
        + ff.pre.len()
        + ff.act.len()
        + masks;
    let cache = DecoderLayerCache {
        self_norm,
        h1,
        self_attn,
        drop_self,
        cross_norm,
        h2,
        cross_attn,
        drop_cross,
        ff_norm,
        h3,
        ff,
        drop_ff,
        _charge: Charge::new(elements),
    };
    (out, cache)
}

/// Returns the gradient for the layer input; the gradient for `memory` is
/// accumulated into `d_memory`.
pub(crate) fn decoder_layer_backward(
    p: &crate::params::DecoderLayer,
    memory: &Array2<f64>,
    cache: &DecoderLayerCache,
    d_out: Array2<f64>,
    grad: &mut crate::params::DecoderLayer,
    d_memory: &mut Array2<f64>,
) -> Array2<f64> {
    let mut df = d_out.clone();
    apply_mask(&mut df, &cache.drop_ff);
    let dh3 = feed_forward_backward(&p.ff, cache.h3.view(), &cache.ff, &df, &mut grad.ff);
    let mut dx2 = d_out;
    dx2 += &layer_norm_backward(&p.ff_norm, &cache.ff_norm, &dh3, &mut grad.ff_norm);

    let mut dc = dx2.clone();
    apply_mask(&mut dc, &cache.drop_cross);
    let (dh2, dmem) = multi_head_attention_backward(&p.cross_attn, cache.h2.view(), memory.view(), &cache.cross_attn, &dc, &mut grad.cross_attn);
    *d_memory += &dmem;
    let mut dx1 = dx2;
    dx1 += &layer_norm_backward(&p.cross_norm, &cache.cross_norm, &dh2, &mut grad.cross_norm);

    let mut da = dx1.clone();
    apply_mask(&mut da, &cache.drop_self);
    let (dq_in, dkv_in) = multi_head_attention_backward(&p.self_attn, cache.h1.view(), cache.h1.view(), &cache.self_attn, &da, &mut grad.self_attn);
    let dh1 = dq_in + &dkv_in;
    let mut dx = dx1;
    dx += &layer_norm_backward(&p.self_norm, &cache.self_norm, &dh1, &mut grad.self_norm);
    dx
}

/// Final layer norm with its cache charged to the activation meter.
pub(crate) struct ChargedNorm {
    cache: NormCache,
    _charge: Charge,
}

pub(crate) fn final_norm(p: &LayerNorm, x: &Array2<f64>) -> (Array2<f64>, ChargedNorm) {
    let (y, cache) = layer_norm(p, x);
    let charge = Charge::new(cache.elements());
    (y, ChargedNorm { cache, _charge: charge })
}

pub(crate) fn final_norm_backward(p: &LayerNorm, cache: &ChargedNorm, dy: &Array2<f64>, grad: &mut LayerNorm) -> Array2<f64> {
    layer_norm_backward(p, &cache.cache, dy, grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn gelu_derivative_matches_differences() {
        for &x in &[-3.0, -0.7, 0.0, 0.4, 2.5] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8);
        }
    }

    #[test]
    fn layer_norm_rows_are_standardized() {
        let p = LayerNorm { gamma: Array1::ones(3), beta: Array1::zeros(3) };
        let x = array![[1.0, 2.0, 3.0], [-4.0, 0.0, 10.0]];
        let (y, _) = layer_norm(&p, &x);
        for row in y.rows() {
            assert!(row.sum().abs() < 1e-12);
            let var = row.iter().map(|v| v * v).sum::<f64>() / 3.0;
            assert!((var - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn dropout_masks_repeat_per_site() {
        let d = Dropout { rate: 0.5, seed: 9 };
        let a = d.mask(site(1, 0, 0), (4, 4)).unwrap();
        assert_eq!(Some(a.clone()), d.mask(site(1, 0, 0), (4, 4)));
        assert_ne!(Some(a), d.mask(site(1, 0, 1), (4, 4)));
        assert!(Dropout { rate: 0.0, seed: 9 }.mask(1, (2, 2)).is_none());
    }
}
