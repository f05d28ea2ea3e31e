//! Adam with global-norm clipping and decoupled weight decay, plus the
//! step-wise exponential learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Gradients are rescaled so their global L2 norm does not exceed this.
    pub clip_norm: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-6,
            clip_norm: 5.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LrSchedule {
    pub initial: f64,
    pub decay: f64,
    /// Epochs per decay step.
    pub every: usize,
}

impl Default for LrSchedule {
    fn default() -> Self {
        LrSchedule {
            initial: 1e-3,
            decay: 0.96,
            every: 2,
        }
    }
}

impl LrSchedule {
    pub fn at(&self, epoch: usize) -> f64 {
        let steps = (epoch / self.every.max(1)) as i32;
        self.initial * self.decay.powi(steps)
    }
}

/// Default schedule: `1e-3 · 0.96^⌊epoch/2⌋`.
pub fn lr_schedule(epoch: usize) -> f64 {
    LrSchedule::default().at(epoch)
}

/// Optimizer moments, shaped like the parameters they track.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimState<F> {
    pub m: Vec<Tensor<F>>,
    pub v: Vec<Tensor<F>>,
    pub step: u64,
    pub lr: f64,
    pub config: AdamConfig,
}

impl<F: Real> OptimState<F> {
    pub fn new(params: &[Tensor<F>], lr: f64, config: AdamConfig) -> Self {
        let zeros = || {
            params
                .iter()
                .map(|p| Tensor::zeros(p.shape().to_vec()))
                .collect()
        };
        OptimState {
            m: zeros(),
            v: zeros(),
            step: 0,
            lr,
            config,
        }
    }
}

pub fn global_norm<F: Real>(grads: &[Tensor<F>]) -> f64 {
    grads
        .iter()
        .flat_map(|g| g.data())
        .map(|&x| x.f64() * x.f64())
        .sum::<f64>()
        .sqrt()
}

/// Rescales `grads` in place so their global norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm<F: Real>(grads: &mut [Tensor<F>], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm && norm > 0.0 {
        let s = F::c(max_norm / norm);
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|x| *x *= s);
        }
    }
    norm
}

/// One update: clip, decoupled weight decay, then the bias-corrected Adam step.
/// Returns the pre-clip gradient norm.
pub fn adam_step<F: Real>(
    params: &mut [Tensor<F>],
    grads: &mut [Tensor<F>],
    state: &mut OptimState<F>,
) -> Result<f64> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::Usage(format!(
            "{} parameters, {} gradients, {} moment slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (p, g) in params.iter().zip(grads.iter()) {
        if p.shape() != g.shape() {
            return Err(Error::Dimension(format!(
                "gradient shape {:?} for parameter {:?}",
                g.shape(),
                p.shape()
            )));
        }
    }
    let cfg = state.config;
    let norm = clip_global_norm(grads, cfg.clip_norm);
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    let (b1, b2) = (F::c(cfg.beta1), F::c(cfg.beta2));
    let (one, lr) = (F::one(), state.lr);
    let shrink = F::c(1.0 - lr * cfg.weight_decay);
    let step = F::c(lr / bc1);
    let sqrt_bc2 = F::c(bc2.sqrt());
    let eps = F::c(cfg.eps);
    for (((p, g), m), v) in params
        .iter_mut()
        .zip(grads.iter())
        .zip(state.m.iter_mut())
        .zip(state.v.iter_mut())
    {
        let (pd, gd) = (p.data_mut(), g.data());
        for (((x, &gi), mi), vi) in pd.iter_mut().zip(gd).zip(m.data_mut()).zip(v.data_mut()) {
            *mi = b1 * *mi + (one - b1) * gi;
            *vi = b2 * *vi + (one - b2) * gi * gi;
            *x *= shrink;
            *x -= step * *mi / ((*vi).sqrt() / sqrt_bc2 + eps);
        }
    }
    Ok(norm)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_values() {
        assert_eq!(lr_schedule(0), 1e-3);
        assert_eq!(lr_schedule(1), 1e-3);
        assert!((lr_schedule(2) - 9.6e-4).abs() < 1e-15);
        assert!((lr_schedule(20) - 6.648e-4).abs() < 1e-7);
    }

    #[test]
    fn zero_gradient_only_decays() {
        let mut p = vec![Tensor::<f64>::full([3], 2.0)];
        let mut g = vec![Tensor::zeros([3])];
        let mut s = OptimState::new(&p, 1e-3, AdamConfig::default());
        adam_step(&mut p, &mut g, &mut s).unwrap();
        let want = 2.0 * (1.0 - 1e-3 * 1e-6);
        assert!(p[0].data().iter().all(|&x| x == want));
    }

    #[test]
    fn clipping_bounds_norm() {
        let mut g = vec![Tensor::<f64>::full([100], 10.0)];
        let before = clip_global_norm(&mut g, 5.0);
        assert!((before - 100.0).abs() < 1e-9);
        assert!(global_norm(&g) <= 5.0 + 1e-9);
    }
}
