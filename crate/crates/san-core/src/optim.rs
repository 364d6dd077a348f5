//! Adam with bias correction, a linear-warmup / inverse-sqrt learning-rate
//! schedule, and global-norm gradient clipping.
//!
//! Parameters and both moment estimates are kept on the f32 grid after every
//! update so that a checkpoint plus optimizer-state file restores training
//! bitwise.

use alloc::collections::BTreeMap;
use alloc::string::String;

use crate::error::{Error, Result};
use crate::params::{GradMap, Params};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct AdamConfig {
    pub peak_lr: f64,
    pub warmup_steps: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub grad_clip: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            peak_lr: 0.002,
            warmup_steps: 400,
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
            grad_clip: 5.0,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        if self.warmup_steps == 0 {
            return Err(Error::InvalidParameter("warmup_steps must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::InvalidParameter("adam betas must be in [0, 1)".into()));
        }
        Ok(())
    }
}

/// lr(step) = peak * min(step / warmup, sqrt(warmup / step)).
/// Ramps linearly to the peak at `warmup_steps`, then decays as 1/sqrt(step).
pub fn lr_schedule(step: u64, cfg: &AdamConfig) -> Result<f64> {
    if step == 0 {
        return Err(Error::Contract("lr_schedule: step must be >= 1"));
    }
    let s = step as f64;
    let w = cfg.warmup_steps as f64;
    Ok(cfg.peak_lr * (s / w).min(libm::sqrt(w / s)))
}

/// First and second moment estimates plus the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: BTreeMap<String, Tensor>,
    pub v: BTreeMap<String, Tensor>,
}

impl AdamState {
    pub fn new(params: &Params) -> Self {
        let mut m = BTreeMap::new();
        let mut v = BTreeMap::new();
        for (name, t) in params.iter() {
            m.insert(name.clone(), Tensor::zeros(t.shape().to_vec()));
            v.insert(name.clone(), Tensor::zeros(t.shape().to_vec()));
        }
        AdamState {
            step: 0,
            m,
            v,
        }
    }
}

/// Scales all gradients by min(1, clip / ||g||_2) over the whole set.
pub fn clip_global_norm(grads: &mut GradMap, clip: f64) -> f64 {
    let mut sq = 0.0;
    for g in grads.values() {
        for x in g.data() {
            sq += x * x;
        }
    }
    let norm = libm::sqrt(sq);
    if clip > 0.0 && norm > clip {
        let scale = clip / norm;
        for g in grads.values_mut() {
            for x in g.data_mut() {
                *x *= scale;
            }
        }
    }
    norm
}

/// One Adam update. Increments the step counter, applies the schedule, and
/// quantizes parameters and moments back to the f32 grid.
pub fn adam_step(
    params: &mut Params,
    state: &mut AdamState,
    grads: &GradMap,
    cfg: &AdamConfig,
) -> Result<f64> {
    cfg.validate()?;
    state.step += 1;
    let lr = lr_schedule(state.step, cfg)?;
    let bc1 = 1.0 - libm::pow(cfg.beta1, state.step as f64);
    let bc2 = 1.0 - libm::pow(cfg.beta2, state.step as f64);
    for (name, g) in grads {
        let Some(p) = params.get_mut(name) else {
            return Err(Error::InvalidParameter(alloc::format!(
                "adam_step: gradient for unknown parameter {name}"
            )));
        };
        let m = state.m.get_mut(name).expect("moment m");
        let v = state.v.get_mut(name).expect("moment v");
        for i in 0..p.len() {
            let gi = g.data()[i];
            let mi = cfg.beta1 * m.data()[i] + (1.0 - cfg.beta1) * gi;
            let vi = cfg.beta2 * v.data()[i] + (1.0 - cfg.beta2) * gi * gi;
            m.data_mut()[i] = mi as f32 as f64;
            v.data_mut()[i] = vi as f32 as f64;
            let m_hat = mi / bc1;
            let v_hat = vi / bc2;
            let next = p.data()[i] - lr * m_hat / (libm::sqrt(v_hat) + cfg.eps);
            p.data_mut()[i] = next as f32 as f64;
        }
    }
    Ok(lr)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn schedule_peaks_at_warmup() {
        let cfg = AdamConfig {
            peak_lr: 0.002,
            warmup_steps: 100,
            ..AdamConfig::default()
        };
        assert!((lr_schedule(100, &cfg).unwrap() - 0.002).abs() < 1e-15);
        // Linear ramp: half way through warmup gives half the peak.
        assert!((lr_schedule(50, &cfg).unwrap() - 0.001).abs() < 1e-15);
        // Inverse sqrt decay: 4x the warmup gives half the peak.
        assert!((lr_schedule(400, &cfg).unwrap() - 0.001).abs() < 1e-15);
        assert!(lr_schedule(0, &cfg).is_err());
    }

    #[test]
    fn schedule_is_monotone_around_peak() {
        let cfg = AdamConfig {
            warmup_steps: 37,
            ..AdamConfig::default()
        };
        let mut prev = lr_schedule(1, &cfg).unwrap();
        for step in 2..=37 {
            let lr = lr_schedule(step, &cfg).unwrap();
            assert!(lr > prev, "not increasing at {step}");
            prev = lr;
        }
        for step in 38..200 {
            let lr = lr_schedule(step, &cfg).unwrap();
            assert!(lr < prev, "not decreasing at {step}");
            prev = lr;
        }
    }

    #[test]
    fn zero_gradient_moves_parameters_negligibly() {
        let mut params = Params::new();
        params.insert("w", Tensor::new(vec![2], vec![1.0, -2.0]).unwrap());
        let mut state = AdamState::new(&params);
        let cfg = AdamConfig::default();
        let mut grads = GradMap::new();
        grads.insert("w".into(), Tensor::zeros(vec![2]));
        adam_step(&mut params, &mut state, &grads, &cfg).unwrap();
        // m = v = 0 so the update is exactly lr * 0 / (0 + eps) = 0.
        assert_eq!(params.get("w").unwrap().data(), &[1.0, -2.0]);
    }

    #[test]
    fn clip_rescales_large_gradients() {
        let mut grads = GradMap::new();
        grads.insert("w".into(), Tensor::new(vec![2], vec![30.0, 40.0]).unwrap());
        let norm = clip_global_norm(&mut grads, 5.0);
        assert!((norm - 50.0).abs() < 1e-12);
        let g = grads.get("w").unwrap().data();
        assert!((g[0] - 3.0).abs() < 1e-12);
        assert!((g[1] - 4.0).abs() < 1e-12);
    }

    #[test]
    fn updates_stay_on_f32_grid() {
        let mut params = Params::new();
        params.insert("w", Tensor::new(vec![1], vec![0.5]).unwrap());
        let mut state = AdamState::new(&params);
        let cfg = AdamConfig::default();
        let mut grads = GradMap::new();
        grads.insert("w".into(), Tensor::new(vec![1], vec![0.3]).unwrap());
        for _ in 0..5 {
            adam_step(&mut params, &mut state, &grads, &cfg).unwrap();
        }
        let w = params.get("w").unwrap().data()[0];
        assert_eq!(w, w as f32 as f64);
        let m = state.m.get("w").unwrap().data()[0];
        assert_eq!(m, m as f32 as f64);
    }
}
