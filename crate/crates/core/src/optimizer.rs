//! Adafactor with factored second moments for matrices.
//!
//! Matrix parameters keep one accumulator per row and one per column; the
//! second-moment estimate is their outer product divided by the mean row
//! accumulator. Vectors keep a full accumulator. No momentum, no weight
//! decay; the learning rate is fixed unless `relative_step` is set.

use ndarray::{Array1, Array2, ArrayD, ArrayViewD, ArrayViewMutD, Axis, Ix2, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::Parameters;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimConfig {
    pub learning_rate: f64,
    pub eps1: f64,
    pub eps2: f64,
    pub clip_threshold: f64,
    /// beta2 at step t is `1 - t^(-decay_exponent)`.
    pub decay_exponent: f64,
    pub relative_step: bool,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            learning_rate: 1e-4,
            eps1: 1e-30,
            eps2: 1e-3,
            clip_threshold: 1.0,
            decay_exponent: 0.8,
            relative_step: false,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid("learning_rate", "must be positive"));
        }
        if self.clip_threshold.is_nan() || self.clip_threshold <= 0.0 {
            return Err(Error::invalid("clip_threshold", "must be positive"));
        }
        if self.eps1 < 0.0 || self.eps2 < 0.0 {
            return Err(Error::invalid("eps1", "epsilons must be non-negative"));
        }
        Ok(())
    }

    pub fn beta2(&self, step: u64) -> f64 {
        1.0 - (step as f64).powf(-self.decay_exponent)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Accumulator {
    Factored { row: Array1<f64>, col: Array1<f64> },
    Full(ArrayD<f64>),
}

impl Accumulator {
    pub fn for_shape(shape: &[usize]) -> Self {
        match *shape {
            [rows, cols] => Accumulator::Factored { row: Array1::zeros(rows), col: Array1::zeros(cols) },
            _ => Accumulator::Full(ArrayD::zeros(shape)),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdafactorState {
    pub step: u64,
    /// One accumulator per parameter array, in [`Parameters::tensors`] order.
    pub slots: Vec<(String, Accumulator)>,
}

pub fn init_state(params: &Parameters) -> AdafactorState {
    AdafactorState {
        step: 0,
        slots: params
            .tensors()
            .into_iter()
            .map(|(name, t)| (name, Accumulator::for_shape(t.shape())))
            .collect(),
    }
}

fn rms(x: &ArrayD<f64>) -> f64 {
    if x.is_empty() {
        return 0.0;
    }
    (x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64).sqrt()
}

fn scaled(g: f64, v: f64) -> f64 {
    if g == 0.0 {
        0.0
    } else {
        g / v.sqrt()
    }
}

/// Updates the accumulator with `grad` and returns the clipped update
/// direction (before multiplying by the learning rate).
pub fn update_direction(grad: ArrayViewD<f64>, acc: &mut Accumulator, beta2: f64, config: &OptimConfig) -> ArrayD<f64> {
    let mut update = match acc {
        Accumulator::Factored { row, col } => {
            let g = grad.view().into_dimensionality::<Ix2>().expect("factored slots hold matrices");
            let sq = g.mapv(|x| x * x + config.eps1);
            let row_mean = sq.mean_axis(Axis(1)).expect("non-empty rows");
            let col_mean = sq.mean_axis(Axis(0)).expect("non-empty cols");
            *row = &*row * beta2 + &(row_mean * (1.0 - beta2));
            *col = &*col * beta2 + &(col_mean * (1.0 - beta2));
            let row_avg = row.mean().unwrap_or(0.0);
            let mut u = Array2::zeros(g.raw_dim());
            if row_avg > 0.0 {
                Zip::indexed(&mut u).and(&g).for_each(|(i, j), u, &gij| {
                    *u = scaled(gij, row[i] * col[j] / row_avg);
                });
            }
            u.into_dyn()
        }
        Accumulator::Full(v) => {
            Zip::from(&mut *v).and(&grad).for_each(|v, &g| *v = beta2 * *v + (1.0 - beta2) * (g * g + config.eps1));
            let mut u = ArrayD::zeros(grad.raw_dim());
            Zip::from(&mut u).and(&grad).and(&*v).for_each(|u, &g, &v| *u = scaled(g, v));
            u
        }
    };
    let denom = (rms(&update) / config.clip_threshold).max(1.0);
    update.mapv_inplace(|u| u / denom);
    update
}

fn step_size(param: &ArrayViewMutD<f64>, step: u64, config: &OptimConfig) -> f64 {
    if !config.relative_step {
        return config.learning_rate;
    }
    let relative = (1.0 / (step as f64).sqrt()).min(1e-2);
    let scale = if param.is_empty() {
        config.eps2
    } else {
        (param.iter().map(|v| v * v).sum::<f64>() / param.len() as f64).sqrt().max(config.eps2)
    };
    relative * scale
}

/// One optimizer step. Parameters and state are left untouched when any
/// gradient entry is non-finite.
pub fn adafactor_step(
    params: &mut Parameters,
    grads: &Parameters,
    state: &mut AdafactorState,
    config: &OptimConfig,
) -> Result<()> {
    let grads = grads.tensors();
    if grads.len() != state.slots.len() {
        return Err(Error::Shape(format!("{} gradients for {} optimizer slots", grads.len(), state.slots.len())));
    }
    for ((name, g), (slot_name, _)) in grads.iter().zip(&state.slots) {
        if name != slot_name {
            return Err(Error::Shape(format!("gradient `{name}` does not match slot `{slot_name}`")));
        }
        if g.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFiniteGradient(name.clone()));
        }
    }
    state.step += 1;
    let beta2 = config.beta2(state.step);
    for ((mut p, (_, g)), (_, acc)) in params
        .tensors_mut()
        .into_iter()
        .map(|(_, p)| p)
        .zip(grads)
        .zip(state.slots.iter_mut())
    {
        if p.shape() != g.shape() {
            return Err(Error::Shape(format!("parameter {:?} vs gradient {:?}", p.shape(), g.shape())));
        }
        let lr = step_size(&p, state.step, config);
        let u = update_direction(g, acc, beta2, config);
        p.scaled_add(-lr, &u);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ModelConfig;
    use ndarray::{array, Array};

    fn tiny() -> ModelConfig {
        ModelConfig {
            vocab_size: 6,
            d_model: 4,
            n_heads: 1,
            n_enc_layers: 1,
            n_dec_layers: 1,
            d_ff: 3,
            window: 2,
            max_enc_len: 4,
            max_dec_len: 3,
            dropout: 0.0,
        }
    }

    #[test]
    fn fresh_state_is_zero() {
        let p = crate::params::Parameters::init(&tiny(), 1);
        let s = init_state(&p);
        assert_eq!(s.step, 0);
        for (name, acc) in &s.slots {
            match acc {
                Accumulator::Factored { row, col } => {
                    assert!(row.iter().chain(col.iter()).all(|&x| x == 0.0), "{name}");
                }
                Accumulator::Full(v) => assert!(v.iter().all(|&x| x == 0.0)),
            }
        }
    }

    #[test]
    fn accumulator_shapes() {
        match Accumulator::for_shape(&[4, 3]) {
            Accumulator::Factored { row, col } => assert_eq!((row.len(), col.len()), (4, 3)),
            _ => panic!("matrix should be factored"),
        }
        match Accumulator::for_shape(&[]) {
            Accumulator::Full(v) => assert_eq!(v.len(), 1),
            _ => panic!("scalar should be unfactored"),
        }
    }

    #[test]
    fn beta2_schedule() {
        let c = OptimConfig::default();
        assert_eq!(c.beta2(1), 0.0);
        assert!((c.beta2(10) - (1.0 - 10f64.powf(-0.8))).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_leaves_params_identical() {
        let mut p = crate::params::Parameters::init(&tiny(), 2);
        let before = p.clone();
        let g = p.zeros_like();
        let mut s = init_state(&p);
        let cfg = OptimConfig { eps1: 0.0, ..OptimConfig::default() };
        adafactor_step(&mut p, &g, &mut s, &cfg).unwrap();
        assert_eq!(p, before);
        adafactor_step(&mut p, &g, &mut s, &OptimConfig::default()).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn non_finite_gradient_is_rejected_without_mutation() {
        let mut p = crate::params::Parameters::init(&tiny(), 2);
        let before = p.clone();
        let mut g = p.zeros_like();
        g.lm_bias[1] = f64::INFINITY;
        let mut s = init_state(&p);
        let err = adafactor_step(&mut p, &g, &mut s, &OptimConfig::default()).unwrap_err();
        assert!(matches!(err, Error::NonFiniteGradient(ref n) if n == "lm_bias"));
        assert_eq!(p, before);
        assert_eq!(s.step, 0);
    }

    #[test]
    fn vector_update_matches_unfactored_rule() {
        let cfg = OptimConfig::default();
        let g = array![0.5, -2.0, 0.0, 3.0].into_dyn();
        let mut acc = Accumulator::for_shape(&[4]);
        let u = update_direction(g.view(), &mut acc, 0.0, &cfg);
        // beta2 = 0: v = g^2 + eps1, u = g / sqrt(v), then clip by RMS.
        let raw: Vec<f64> = g.iter().map(|&x| if x == 0.0 { 0.0 } else { x / (x * x + cfg.eps1).sqrt() }).collect();
        let r = (raw.iter().map(|x| x * x).sum::<f64>() / 4.0).sqrt().max(1.0);
        for (a, b) in u.iter().zip(&raw) {
            assert_eq!(*a, b / r);
        }
    }

    #[test]
    fn clipping_bounds_rms() {
        let cfg = OptimConfig { clip_threshold: 0.5, ..OptimConfig::default() };
        let g = Array::from_shape_fn((5, 3), |(i, j)| (i as f64 - 2.0) * (j as f64 + 1.0)).into_dyn();
        let mut acc = Accumulator::for_shape(&[5, 3]);
        let u = update_direction(g.view(), &mut acc, 0.0, &cfg);
        assert!(rms(&u) <= 0.5 * (1.0 + 1e-12));
    }

    #[test]
    fn step_is_deterministic() {
        let base = crate::params::Parameters::init(&tiny(), 3);
        let grads = crate::params::Parameters::init(&tiny(), 4);
        let run = || {
            let mut p = base.clone();
            let mut s = init_state(&p);
            adafactor_step(&mut p, &grads, &mut s, &OptimConfig::default()).unwrap();
            adafactor_step(&mut p, &grads, &mut s, &OptimConfig::default()).unwrap();
            (p, s)
        };
        assert_eq!(run(), run());
    }
}
