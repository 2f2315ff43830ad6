//! Scaled dot-product attention over sparse key sets.
//!
//! Every query row gathers its allowed keys (a band of `window / 2` on each
//! side, plus global positions) and runs softmax over that set only, so
//! cost and stored probabilities grow with `n * (window + globals)`.
//! [`full_attention_reference`] is a separate dense implementation used as
//! the oracle for the sparse route.

use ndarray::{s, Array2, ArrayView2, ArrayViewMut2, Axis};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionSpec {
    /// Full window width; a token sees `window / 2` neighbours on each side.
    pub window: usize,
    /// `true` for real tokens, `false` for padding (applies to keys).
    pub pad_mask: Vec<bool>,
    pub global_mask: Vec<bool>,
    pub causal: bool,
}

impl AttentionSpec {
    pub fn new(n: usize, window: usize) -> Self {
        AttentionSpec { window, pad_mask: vec![true; n], global_mask: vec![false; n], causal: false }
    }

    pub fn from_masks(window: usize, attention_mask: &[u8], global_mask: &[u8]) -> Self {
        AttentionSpec {
            window,
            pad_mask: attention_mask.iter().map(|&m| m != 0).collect(),
            global_mask: global_mask.iter().zip(attention_mask).map(|(&g, &m)| g != 0 && m != 0).collect(),
            causal: false,
        }
    }

    pub fn causal(mut self) -> Self {
        self.causal = true;
        self
    }

    pub fn with_globals(mut self, positions: &[usize]) -> Self {
        for &p in positions {
            if p < self.global_mask.len() {
                self.global_mask[p] = true;
            }
        }
        self
    }

    fn validate(&self, n: usize) -> Result<()> {
        if self.pad_mask.len() != n || self.global_mask.len() != n {
            return Err(Error::Shape(format!(
                "masks of length {}/{} for {n} positions",
                self.pad_mask.len(),
                self.global_mask.len()
            )));
        }
        if !self.window.is_multiple_of(2) {
            return Err(Error::invalid("window", format!("{} is not even", self.window)));
        }
        if self.causal && self.global_mask.iter().any(|&g| g) {
            return Err(Error::invalid("global_mask", "global positions cannot be combined with causal attention"));
        }
        Ok(())
    }
}

/// Which keys a query row may attend to.
#[derive(Debug, Clone, Copy)]
pub(crate) enum KeyPattern<'a> {
    Sliding {
        half: usize,
        key_mask: &'a [bool],
        global: &'a [bool],
        global_idx: &'a [usize],
        causal: bool,
    },
    /// Every unmasked key; `causal` restricts row `i` to keys `<= i`.
    Dense { key_mask: &'a [bool], causal: bool },
}

impl KeyPattern<'_> {
    pub(crate) fn keys(&self, i: usize, out: &mut Vec<usize>) {
        out.clear();
        match *self {
            KeyPattern::Dense { key_mask, causal } => {
                let end = if causal { (i + 1).min(key_mask.len()) } else { key_mask.len() };
                out.extend((0..end).filter(|&j| key_mask[j]));
            }
            KeyPattern::Sliding { half, key_mask, global, global_idx, causal } => {
                let n = key_mask.len();
                if global[i] {
                    out.extend((0..n).filter(|&j| key_mask[j]));
                    return;
                }
                let lo = i.saturating_sub(half);
                let hi = if causal { i } else { (i + half).min(n - 1) };
                out.extend(global_idx.iter().copied().filter(|&g| g < lo && key_mask[g]));
                out.extend((lo..=hi).filter(|&j| key_mask[j]));
                out.extend(global_idx.iter().copied().filter(|&g| g > hi && key_mask[g]));
            }
        }
    }
}

/// Attention probabilities stored row by row in compressed form.
#[derive(Debug, Clone, Default)]
pub(crate) struct SparseProbs {
    pub(crate) offsets: Vec<usize>,
    pub(crate) keys: Vec<u32>,
    pub(crate) probs: Vec<f64>,
}

impl SparseProbs {
    pub(crate) fn row(&self, i: usize) -> (&[u32], &[f64]) {
        let (a, b) = (self.offsets[i], self.offsets[i + 1]);
        (&self.keys[a..b], &self.probs[a..b])
    }

    pub(crate) fn stored(&self) -> usize {
        self.probs.len() + self.offsets.len()
    }
}

fn dot(a: ndarray::ArrayView1<f64>, b: ndarray::ArrayView1<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
}

/// Forward pass of one head. `out` receives the weighted values.
pub(crate) fn attend_forward(
    q: ArrayView2<f64>,
    k: ArrayView2<f64>,
    v: ArrayView2<f64>,
    pattern: &KeyPattern,
    mut out: ArrayViewMut2<f64>,
) -> SparseProbs {
    let n = q.nrows();
    let scale = 1.0 / (q.ncols() as f64).sqrt();
    let mut probs = SparseProbs { offsets: Vec::with_capacity(n + 1), ..Default::default() };
    probs.offsets.push(0);
    let mut keys = Vec::new();
    let mut scores = Vec::new();
    for i in 0..n {
        pattern.keys(i, &mut keys);
        let mut row_out = out.row_mut(i);
        row_out.fill(0.0);
        if !keys.is_empty() {
            let qi = q.row(i);
            scores.clear();
            scores.extend(keys.iter().map(|&j| scale * dot(qi, k.row(j))));
            let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for s in scores.iter_mut() {
                *s = (*s - max).exp();
                total += *s;
            }
            for (s, &j) in scores.iter_mut().zip(&keys) {
                *s /= total;
                row_out.scaled_add(*s, &v.row(j));
            }
            probs.keys.extend(keys.iter().map(|&j| j as u32));
            probs.probs.extend_from_slice(&scores);
        }
        probs.offsets.push(probs.probs.len());
    }
    probs
}

/// Backward pass of one head; returns gradients for q, k and v.
pub(crate) fn attend_backward(
    q: ArrayView2<f64>,
    k: ArrayView2<f64>,
    v: ArrayView2<f64>,
    probs: &SparseProbs,
    d_out: ArrayView2<f64>,
) -> (Array2<f64>, Array2<f64>, Array2<f64>) {
    let scale = 1.0 / (q.ncols() as f64).sqrt();
    let mut dq = Array2::zeros(q.raw_dim());
    let mut dk = Array2::zeros(k.raw_dim());
    let mut dv = Array2::zeros(v.raw_dim());
    let mut dp = Vec::new();
    for i in 0..q.nrows() {
        let (keys, p) = probs.row(i);
        if keys.is_empty() {
            continue;
        }
        let go = d_out.row(i);
        dp.clear();
        dp.extend(keys.iter().map(|&j| dot(go, v.row(j as usize))));
        let weighted: f64 = p.iter().zip(&dp).map(|(a, b)| a * b).sum();
        let qi = q.row(i);
        for ((&j, &pij), &dpij) in keys.iter().zip(p).zip(&dp) {
            let j = j as usize;
            dv.row_mut(j).scaled_add(pij, &go);
            let ds = pij * (dpij - weighted) * scale;
            dq.row_mut(i).scaled_add(ds, &k.row(j));
            dk.row_mut(j).scaled_add(ds, &qi);
        }
    }
    (dq, dk, dv)
}

fn check_shapes(q: &ArrayView2<f64>, k: &ArrayView2<f64>, v: &ArrayView2<f64>) -> Result<()> {
    if q.ncols() != k.ncols() || k.nrows() != v.nrows() || q.ncols() == 0 {
        return Err(Error::Shape(format!(
            "q {:?}, k {:?}, v {:?}",
            q.shape(),
            k.shape(),
            v.shape()
        )));
    }
    Ok(())
}

fn sliding_pattern<'a>(spec: &'a AttentionSpec, global_idx: &'a [usize]) -> KeyPattern<'a> {
    KeyPattern::Sliding {
        half: spec.window / 2,
        key_mask: &spec.pad_mask,
        global: &spec.global_mask,
        global_idx,
        causal: spec.causal,
    }
}

/// Local windowed attention with global tokens, for self-attention
/// (`q`, `k` and `v` have the same number of rows).
pub fn sliding_window_attention(
    q: ArrayView2<f64>,
    k: ArrayView2<f64>,
    v: ArrayView2<f64>,
    spec: &AttentionSpec,
) -> Result<Array2<f64>> {
    check_shapes(&q, &k, &v)?;
    if q.nrows() != k.nrows() {
        return Err(Error::Shape(format!("self-attention with {} queries and {} keys", q.nrows(), k.nrows())));
    }
    spec.validate(q.nrows())?;
    let global_idx: Vec<usize> = (0..q.nrows()).filter(|&i| spec.global_mask[i]).collect();
    let mut out = Array2::zeros((q.nrows(), v.ncols()));
    attend_forward(q, k, v, &sliding_pattern(spec, &global_idx), out.view_mut());
    Ok(out)
}

/// Per-row attention weights of [`sliding_window_attention`] as
/// `(key index, probability)` lists.
pub fn attention_weights(
    q: ArrayView2<f64>,
    k: ArrayView2<f64>,
    v: ArrayView2<f64>,
    spec: &AttentionSpec,
) -> Result<Vec<Vec<(usize, f64)>>> {
    check_shapes(&q, &k, &v)?;
    spec.validate(q.nrows())?;
    let global_idx: Vec<usize> = (0..q.nrows()).filter(|&i| spec.global_mask[i]).collect();
    let mut out = Array2::zeros((q.nrows(), v.ncols()));
    let probs = attend_forward(q, k, v, &sliding_pattern(spec, &global_idx), out.view_mut());
    Ok((0..q.nrows())
        .map(|i| {
            let (keys, p) = probs.row(i);
            keys.iter().map(|&j| j as usize).zip(p.iter().copied()).collect()
        })
        .collect())
}

/// Dense attention: `softmax(Q K^T / sqrt(d) + mask) V` with padding (and
/// the causal triangle, when set) masked out. The window is ignored.
pub fn full_attention_reference(
    q: ArrayView2<f64>,
    k: ArrayView2<f64>,
    v: ArrayView2<f64>,
    spec: &AttentionSpec,
) -> Result<Array2<f64>> {
    check_shapes(&q, &k, &v)?;
    if spec.pad_mask.len() != k.nrows() {
        return Err(Error::Shape(format!("pad mask of {} for {} keys", spec.pad_mask.len(), k.nrows())));
    }
    let allowed = Array2::from_shape_fn((q.nrows(), k.nrows()), |(i, j)| {
        spec.pad_mask[j] && (!spec.causal || j <= i)
    });
    masked_attention_reference(q, k, v, &allowed)
}

/// Dense attention with an explicit boolean mask (`true` = may attend).
/// Rows with nothing allowed produce zeros.
pub fn masked_attention_reference(
    q: ArrayView2<f64>,
    k: ArrayView2<f64>,
    v: ArrayView2<f64>,
    allowed: &Array2<bool>,
) -> Result<Array2<f64>> {
    check_shapes(&q, &k, &v)?;
    if allowed.dim() != (q.nrows(), k.nrows()) {
        return Err(Error::Shape(format!("mask {:?} for {}x{} scores", allowed.dim(), q.nrows(), k.nrows())));
    }
    let scale = 1.0 / (q.ncols() as f64).sqrt();
    let mut scores = q.dot(&k.t()) * scale;
    ndarray::Zip::from(&mut scores).and(allowed).for_each(|s, &ok| {
        if !ok {
            *s = f64::NEG_INFINITY;
        }
    });
    for mut row in scores.axis_iter_mut(Axis(0)) {
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        if max == f64::NEG_INFINITY {
            row.fill(0.0);
            continue;
        }
        row.mapv_inplace(|s| (s - max).exp());
        let total = row.sum();
        row /= total;
    }
    Ok(scores.dot(&v))
}

/// Column block of head `h` out of `n_heads`.
pub(crate) fn head_cols(h: usize, head_dim: usize) -> ndarray::SliceInfo<[ndarray::SliceInfoElem; 2], ndarray::Ix2, ndarray::Ix2> {
    s![.., h * head_dim..(h + 1) * head_dim]
}
