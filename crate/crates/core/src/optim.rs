//! AdamW with decoupled weight decay, and the linear warm-up/decay schedule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = 0.0..1.0;
        if !unit.contains(&self.beta1) || !unit.contains(&self.beta2) {
            return Err(Error::config(format!(
                "betas ({}, {}) must lie in [0, 1)",
                self.beta1, self.beta2
            )));
        }
        if self.eps < 0.0 || self.weight_decay < 0.0 {
            return Err(Error::config("eps and weight_decay must be non-negative"));
        }
        Ok(())
    }
}

/// First/second moment buffers, one pair per parameter of a store.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub config: AdamWConfig,
    pub step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub fn new(store: &ParamStore, config: AdamWConfig) -> Self {
        let zeros = || store.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
        Self {
            config,
            step: 0,
            first: zeros(),
            second: zeros(),
        }
    }

    pub fn first_moment(&self, index: usize) -> &[f64] {
        &self.first[index]
    }

    pub fn second_moment(&self, index: usize) -> &[f64] {
        &self.second[index]
    }
}

/// One bias-corrected AdamW update at learning rate `lr`.
///
/// Weight decay is applied to the weights directly (`w -= lr * wd * w`) and
/// never enters the moment estimates.
pub fn adamw_step(store: &mut ParamStore, state: &mut OptimizerState, lr: f64) -> Result<()> {
    if state.first.len() != store.len() {
        return Err(Error::invalid("optimizer state does not match parameter store"));
    }
    for id in store.ids() {
        let t = store.get(id);
        if t.requires_grad() && t.grad().is_none() {
            return Err(Error::MissingGradient(store.name(id).to_string()));
        }
    }
    state.step += 1;
    let AdamWConfig {
        beta1,
        beta2,
        eps,
        weight_decay,
    } = state.config;
    let step = state.step as i32;
    let bc1 = 1.0 - beta1.powi(step);
    let bc2 = 1.0 - beta2.powi(step);
    let ids: Vec<_> = store.ids().collect();
    for (slot, id) in ids.into_iter().enumerate() {
        let t = store.get_mut(id);
        if !t.requires_grad() {
            continue;
        }
        let g = t.grad().expect("checked above").to_vec();
        let m = &mut state.first[slot];
        let v = &mut state.second[slot];
        for (i, w) in t.data_mut().iter_mut().enumerate() {
            m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
            v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            *w -= lr * weight_decay * *w;
            *w -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Linear warm-up from 0 to `peak_lr`, then linear decay to 0.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    pub peak_lr: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
}

impl ScheduleConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.peak_lr.is_finite() && self.peak_lr > 0.0) {
            return Err(Error::config(format!("peak_lr {} must be positive", self.peak_lr)));
        }
        if self.warmup_steps == 0 || self.warmup_steps > self.total_steps {
            return Err(Error::config(format!(
                "need 0 < warmup_steps ({}) <= total_steps ({})",
                self.warmup_steps, self.total_steps
            )));
        }
        Ok(())
    }

    /// Learning rate at `step`; 0 at step 0 and at or beyond `total_steps`.
    pub fn lr_at(&self, step: u64) -> f64 {
        if step >= self.total_steps && step != self.warmup_steps {
            return 0.0;
        }
        if step <= self.warmup_steps {
            let frac = step as f64 / self.warmup_steps as f64;
            return self.peak_lr * frac;
        }
        let frac = (self.total_steps - step) as f64 / (self.total_steps - self.warmup_steps) as f64;
        self.peak_lr * frac
    }
}

/// Peak learning rates explored when tuning, 1e-5 to 6e-5.
pub fn tuning_lr_grid() -> Vec<f64> {
    (1..=6).map(|i| i as f64 * 1e-5).collect()
}
