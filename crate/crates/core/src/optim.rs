//! AdamW with decoupled weight decay and a linear warm-up + cosine decay
//! learning-rate schedule.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Real;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub lr_peak: f64,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub epochs: usize,
    /// Warm-up length in optimizer steps; one epoch of steps when absent.
    pub warmup_steps: Option<usize>,
    pub betas: (f64, f64),
    pub epsilon: f64,
    pub seed: u64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self::probing()
    }
}

impl OptimConfig {
    /// Probing recipe: 20 epochs, weight decay 1e-3.
    pub fn probing() -> Self {
        Self {
            lr_peak: 1e-3,
            batch_size: 16,
            weight_decay: 1e-3,
            epochs: 20,
            warmup_steps: None,
            betas: (0.9, 0.999),
            epsilon: 1e-8,
            seed: 0,
        }
    }

    /// Adaptation recipe: 40 epochs, weight decay 1e-5.
    pub fn adaptation() -> Self {
        Self {
            weight_decay: 1e-5,
            epochs: 40,
            ..Self::probing()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.into()));
        if !(self.lr_peak >= 0.0 && self.lr_peak.is_finite()) {
            return bad("lr_peak must be non-negative");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if !(self.weight_decay >= 0.0) || !(self.epsilon > 0.0) {
            return bad("weight_decay must be >= 0 and epsilon > 0");
        }
        let (b1, b2) = self.betas;
        if !((0.0..1.0).contains(&b1) && (0.0..1.0).contains(&b2)) {
            return bad("betas must lie in [0, 1)");
        }
        Ok(())
    }

    pub fn steps_per_epoch(&self, samples: usize) -> usize {
        samples.div_ceil(self.batch_size)
    }

    pub fn schedule(&self, samples: usize) -> Result<Schedule> {
        let per_epoch = self.steps_per_epoch(samples);
        let total = per_epoch * self.epochs;
        let warmup = self.warmup_steps.unwrap_or(per_epoch);
        Schedule::new(self.lr_peak, warmup, total)
    }
}

/// Linear warm-up from 0 to `lr_peak` over `warmup_steps`, then cosine decay
/// to 0 at `total_steps`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Schedule {
    pub lr_peak: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
}

impl Schedule {
    pub fn new(lr_peak: f64, warmup_steps: usize, total_steps: usize) -> Result<Self> {
        if warmup_steps > total_steps {
            return Err(Error::InvalidConfig(format!(
                "warmup_steps {warmup_steps} exceeds total steps {total_steps}"
            )));
        }
        Ok(Self {
            lr_peak,
            warmup_steps,
            total_steps,
        })
    }

    /// Learning rate at `step`, clamped to `[0, total_steps]`.
    pub fn lr_at(&self, step: usize) -> f64 {
        let step = step.min(self.total_steps);
        if step < self.warmup_steps {
            return self.lr_peak * step as f64 / self.warmup_steps as f64;
        }
        let span = self.total_steps - self.warmup_steps;
        if span == 0 {
            return self.lr_peak;
        }
        let progress = (step - self.warmup_steps) as f64 / span as f64;
        (self.lr_peak * 0.5 * (1.0 + (PI * progress).cos())).max(0.0)
    }
}

/// Per-parameter moment estimates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl OptimState {
    pub fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
        }
    }
}

/// One AdamW update in place. The decay `w <- w (1 - lr wd)` is applied before
/// the bias-corrected Adam step.
pub fn adamw_step<S: Real>(
    params: &mut [S],
    grads: &[S],
    state: &mut OptimState,
    lr: f64,
    config: &OptimConfig,
) -> Result<()> {
    if params.len() != grads.len() || state.m.len() != params.len() {
        return Err(Error::InvalidInput(format!(
            "adamw: {} params, {} grads, {} moments",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    if let Some(k) = grads.iter().position(|g| !g.is_finite()) {
        return Err(Error::TrainingFault {
            step: state.step + 1,
            reason: format!("non-finite gradient at parameter {k}"),
        });
    }
    state.step += 1;
    let (b1, b2) = config.betas;
    let bc1 = 1.0 - b1.powi(state.step as i32);
    let bc2 = 1.0 - b2.powi(state.step as i32);
    let decay = 1.0 - lr * config.weight_decay;
    for (((w, &g), m), v) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut())
        .zip(state.v.iter_mut())
    {
        let g = g.as_f64();
        *m = b1 * *m + (1.0 - b1) * g;
        *v = b2 * *v + (1.0 - b2) * g * g;
        let m_hat = *m / bc1;
        let v_hat = *v / bc2;
        let updated = w.as_f64() * decay - lr * m_hat / (v_hat.sqrt() + config.epsilon);
        *w = S::of(updated);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sched() -> Schedule {
        Schedule::new(1e-3, 10, 100).unwrap()
    }

    #[test]
    fn schedule_examples() {
        let s = sched();
        assert_eq!(s.lr_at(0), 0.0);
        assert_eq!(s.lr_at(10), 1e-3);
        assert_eq!(s.lr_at(100), 0.0);
        assert_eq!(s.lr_at(5), 5e-4);
        assert!((s.lr_at(55) - 5e-4).abs() < 1e-15);
        assert!(Schedule::new(1e-3, 11, 10).is_err());
    }

    #[test]
    fn schedule_is_continuous_and_non_negative() {
        let s = Schedule::new(2e-3, 400, 1000).unwrap();
        let below = s.lr_peak * 399.0 / 400.0;
        assert!((s.lr_at(400) - below).abs() <= s.lr_peak / 400.0 + 1e-15);
        let mut prev = 0.0;
        for step in 0..=1000 {
            let lr = s.lr_at(step);
            assert!(lr >= 0.0);
            assert!((lr - prev).abs() <= s.lr_peak * 0.003, "jump at {step}");
            prev = lr;
        }
    }

    #[test]
    fn default_warmup_is_one_epoch() {
        let c = OptimConfig::probing();
        let s = c.schedule(160).unwrap();
        assert_eq!((s.warmup_steps, s.total_steps), (10, 200));
        assert_eq!(OptimConfig::adaptation().weight_decay, 1e-5);
        assert_eq!(OptimConfig::adaptation().epochs, 40);
    }

    #[test]
    fn zero_gradient_steps() {
        let mut cfg = OptimConfig { weight_decay: 0.0, ..OptimConfig::probing() };
        let mut w = vec![0.5f64, -2.0];
        let mut st = OptimState::new(2);
        adamw_step(&mut w, &[0.0, 0.0], &mut st, 1e-3, &cfg).unwrap();
        assert_eq!(w, vec![0.5, -2.0]);

        cfg.weight_decay = 1e-3;
        adamw_step(&mut w, &[0.0, 0.0], &mut st, 1e-3, &cfg).unwrap();
        assert_eq!(w, vec![0.5 * (1.0 - 1e-6), -2.0 * (1.0 - 1e-6)]);
    }

    #[test]
    fn single_step_closed_form() {
        // m = 0.1, v = 0.001; bias-corrected both are 1 -> delta = lr / (1 + eps)
        let cfg = OptimConfig::probing();
        let mut w = vec![0.3f64];
        let mut st = OptimState::new(1);
        adamw_step(&mut w, &[1.0], &mut st, 1e-3, &cfg).unwrap();
        let want = 0.3 * (1.0 - 1e-3 * 1e-3) - 1e-3 * 1.0 / (1.0 + 1e-8);
        assert!((w[0] - want).abs() < 1e-15);
    }

    #[test]
    fn two_step_adam_trace() {
        // weight decay 0: plain Adam. Hand evaluation for g1 = (1, -2), g2 = (0.5, 4).
        let cfg = OptimConfig { weight_decay: 0.0, ..OptimConfig::probing() };
        let lr = 0.01;
        let mut w = vec![1.0f64, 1.0];
        let mut st = OptimState::new(2);
        adamw_step(&mut w, &[1.0, -2.0], &mut st, lr, &cfg).unwrap();
        let w1 = [1.0 - lr / (1.0 + 1e-8), 1.0 + lr * 2.0 / (2.0 + 1e-8)];
        assert!((w[0] - w1[0]).abs() < 1e-15 && (w[1] - w1[1]).abs() < 1e-15);
        adamw_step(&mut w, &[0.5, 4.0], &mut st, lr, &cfg).unwrap();
        let m = [0.9 * 0.1 + 0.1 * 0.5, 0.9 * -0.2 + 0.1 * 4.0];
        let v: [f64; 2] = [0.999 * 0.001 + 0.001 * 0.25, 0.999 * 0.004 + 0.001 * 16.0];
        let (bc1, bc2): (f64, f64) = (1.0 - 0.81, 1.0 - 0.998001);
        for k in 0..2 {
            let want = w1[k] - lr * (m[k] / bc1) / ((v[k] / bc2).sqrt() + 1e-8);
            assert!((w[k] - want).abs() < 1e-14, "param {k}");
        }
    }

    #[test]
    fn non_finite_gradient_is_a_training_fault() {
        let cfg = OptimConfig::probing();
        let mut w = vec![0.0f64; 3];
        let mut st = OptimState::new(3);
        adamw_step(&mut w, &[0.0, 1.0, 0.0], &mut st, 1e-3, &cfg).unwrap();
        let err = adamw_step(&mut w, &[0.0, f64::NAN, 0.0], &mut st, 1e-3, &cfg).unwrap_err();
        assert!(matches!(err, Error::TrainingFault { step: 2, .. }));
        assert!(adamw_step(&mut w, &[0.0], &mut st, 1e-3, &cfg).is_err());
    }
}
