//! Lion, its majority-vote distributed variants, and momentum bookkeeping.
//!
//! All arithmetic on parameters and momentum is f32 and goes through the same
//! three helpers ([`interpolate`], [`apply_direction`], [`accumulate`]) so that
//! degenerate distributed configurations reproduce single-worker Lion bit for bit.

mod checkpoint;
mod distributed;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta};
pub use distributed::{
    distributed_lion_step, maybe_sync_momentum, momentum_divergence, signsgd_majority_step,
    DistLionConfig, LayerSelector, StepStats, SyncPolicy, UpdateCodec, VoteAlgo,
};

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::quant::SignPolicy;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LrSchedule {
    Constant { lr: f64 },
    /// Cosine decay from `base` to `min` over `total_steps`, flat afterwards.
    Cosine { base: f64, min: f64, total_steps: u64 },
}

impl LrSchedule {
    /// Learning rate at 1-based step `t`.
    pub fn at(&self, t: u64) -> f64 {
        match *self {
            LrSchedule::Constant { lr } => lr,
            LrSchedule::Cosine {
                base,
                min,
                total_steps,
            } => {
                let progress = (t.saturating_sub(1) as f64 / total_steps.max(1) as f64).min(1.0);
                min + 0.5 * (base - min) * (1.0 + (PI * progress).cos())
            }
        }
    }
}

/// How the weight-decay term enters the parameter update.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecayMode {
    /// `θ ← θ − η (sign(c) + λ θ)`.
    #[default]
    Decoupled,
    /// `θ ← θ − η sign(c) + λ θ`, the update exactly as written in the distributed algorithm listing.
    Literal,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LionHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub lr: LrSchedule,
    #[serde(default)]
    pub weight_decay: f64,
    #[serde(default)]
    pub decay_mode: DecayMode,
}

impl LionHyper {
    pub fn constant(lr: f64, beta1: f64, beta2: f64) -> Self {
        LionHyper {
            beta1,
            beta2,
            lr: LrSchedule::Constant { lr },
            weight_decay: 0.0,
            decay_mode: DecayMode::Decoupled,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(b > 0.0 && b < 1.0) {
                return Err(Error::config(format!("{name} must lie in (0, 1), got {b}")));
            }
        }
        let positive = match self.lr {
            LrSchedule::Constant { lr } => lr > 0.0,
            LrSchedule::Cosine { base, min, .. } => base > 0.0 && min > 0.0,
        };
        if !positive {
            return Err(Error::config("learning rate must be positive at every step"));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::config("weight decay must be non-negative"));
        }
        Ok(())
    }
}

/// Per-worker optimizer state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkerState {
    pub params: ParamSet,
    pub momentum: ParamSet,
    /// Number of completed steps.
    pub iteration: u64,
}

impl WorkerState {
    pub fn new(params: ParamSet) -> Self {
        let momentum = params.zeros_like();
        WorkerState {
            params,
            momentum,
            iteration: 0,
        }
    }
}

/// `c = β1 m + (1 − β1) g`.
#[inline]
pub fn interpolate(m: f32, g: f32, beta1: f32) -> f32 {
    beta1 * m + (1.0 - beta1) * g
}

/// `m ← β2 m + (1 − β2) g`.
#[inline]
pub fn accumulate(m: f32, g: f32, beta2: f32) -> f32 {
    beta2 * m + (1.0 - beta2) * g
}

/// Apply a sign direction in `{-1, 0, 1}` with weight decay.
#[inline]
pub fn apply_direction(theta: f32, direction: i8, lr: f32, weight_decay: f32, mode: DecayMode) -> f32 {
    match mode {
        DecayMode::Decoupled => theta - lr * (direction as f32 + weight_decay * theta),
        DecayMode::Literal => theta - lr * direction as f32 + weight_decay * theta,
    }
}

/// One single-worker Lion step; `sign(0) = 0`.
pub fn lion_step(state: &mut WorkerState, grad: &ParamSet, h: &LionHyper) -> Result<()> {
    state.params.check_same_shape(grad)?;
    let t = state.iteration + 1;
    let lr = h.lr.at(t) as f32;
    let (b1, b2, wd) = (h.beta1 as f32, h.beta2 as f32, h.weight_decay as f32);
    let policy = SignPolicy::exact();
    for ((theta, m), g) in state
        .params
        .layers
        .iter_mut()
        .zip(state.momentum.layers.iter_mut())
        .zip(&grad.layers)
    {
        for ((th, mv), &gv) in theta.values.iter_mut().zip(m.values.iter_mut()).zip(&g.values) {
            let c = interpolate(*mv, gv, b1);
            *th = apply_direction(*th, policy.sign(c), lr, wd, h.decay_mode);
            *mv = accumulate(*mv, gv, b2);
        }
    }
    state.iteration = t;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::Layer;

    fn single(v: f32) -> ParamSet {
        ParamSet::new(vec![Layer {
            name: "w".into(),
            shape: vec![1],
            values: vec![v],
        }])
    }

    #[test]
    fn one_step_by_hand() {
        let mut s = WorkerState::new(single(0.0));
        lion_step(&mut s, &single(2.0), &LionHyper::constant(0.1, 0.9, 0.99)).unwrap();
        assert!((s.params.layers[0].values[0] + 0.1).abs() < 1e-7);
        assert!((s.momentum.layers[0].values[0] - 0.02).abs() < 1e-7);
        assert_eq!(s.iteration, 1);
    }

    #[test]
    fn zero_gradient_is_fixed_point() {
        let mut s = WorkerState::new(single(0.5));
        lion_step(&mut s, &single(0.0), &LionHyper::constant(0.1, 0.9, 0.99)).unwrap();
        assert_eq!(s.params.layers[0].values[0], 0.5);
    }

    #[test]
    fn decoupled_decay() {
        let mut h = LionHyper::constant(0.1, 0.9, 0.99);
        h.weight_decay = 0.1;
        let mut s = WorkerState::new(single(1.0));
        lion_step(&mut s, &single(0.0), &h).unwrap();
        assert!((s.params.layers[0].values[0] - 0.99).abs() < 1e-7);

        h.decay_mode = DecayMode::Literal;
        let mut s = WorkerState::new(single(1.0));
        lion_step(&mut s, &single(0.0), &h).unwrap();
        assert!((s.params.layers[0].values[0] - 1.1).abs() < 1e-6);
    }

    #[test]
    fn shape_mismatch() {
        let mut s = WorkerState::new(single(0.0));
        let g = ParamSet::new(vec![Layer::zeros("w", vec![2])]);
        assert!(matches!(
            lion_step(&mut s, &g, &LionHyper::constant(0.1, 0.9, 0.99)),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn hyper_validation() {
        assert!(LionHyper::constant(0.1, 1.0, 0.5).validate().is_err());
        assert!(LionHyper::constant(0.0, 0.9, 0.99).validate().is_err());
        assert!(LionHyper::constant(0.1, 0.9, 0.99).validate().is_ok());
    }

    #[test]
    fn cosine_schedule_endpoints() {
        let s = LrSchedule::Cosine {
            base: 1.0,
            min: 0.1,
            total_steps: 10,
        };
        assert!((s.at(1) - 1.0).abs() < 1e-12);
        assert!((s.at(11) - 0.1).abs() < 1e-12);
        assert!((s.at(100) - 0.1).abs() < 1e-12);
        assert!(s.at(5) < s.at(4));
    }

    #[test]
    fn equal_betas_match_sign_descent_with_momentum() {
        // with β1 = β2 = β, the Lion direction is sign of the EMA m_t, i.e. sign descent with momentum
        let beta = 0.8f32;
        let h = LionHyper::constant(0.01, beta as f64, beta as f64);
        let mut s = WorkerState::new(single(0.0));
        let mut ema = 0.0f32;
        let grads = [0.3f32, -1.0, 0.2, 0.25, -0.05, 0.9, -0.4];
        for &g in &grads {
            let before = s.params.layers[0].values[0];
            lion_step(&mut s, &single(g), &h).unwrap();
            ema = accumulate(ema, g, beta);
            let step = before - s.params.layers[0].values[0];
            assert_eq!(SignPolicy::exact().sign(step), SignPolicy::exact().sign(ema));
            assert_eq!(s.momentum.layers[0].values[0], ema);
        }
    }
}
