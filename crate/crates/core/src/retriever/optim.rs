//! Optimizer with linear warm-up and cosine decay.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use super::{Grads, RetrieverParams};
use crate::error::{RarError, Result};

pub const DEFAULT_WARMUP: u64 = 100;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub base_lr: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
}

impl LrSchedule {
    pub fn lr(&self, step: u64) -> f64 {
        if step < self.warmup_steps {
            return self.base_lr * (step + 1) as f64 / self.warmup_steps as f64;
        }
        let span = self.total_steps.saturating_sub(self.warmup_steps).max(1);
        let progress = ((step - self.warmup_steps) as f64 / span as f64).min(1.0);
        self.base_lr * 0.5 * (1.0 + (PI * progress).cos())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UpdateRule {
    #[default]
    Adam,
    Sgd,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Optimizer {
    #[serde(default)]
    pub rule: UpdateRule,
    pub schedule: LrSchedule,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip; 0 disables.
    pub clip_norm: f64,
    pub step: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Optimizer {
    pub fn new(schedule: LrSchedule) -> Result<Self> {
        if !(schedule.base_lr > 0.0 && schedule.base_lr.is_finite()) {
            return Err(RarError::invalid(format!("learning rate must be positive, got {}", schedule.base_lr)));
        }
        Ok(Optimizer {
            rule: UpdateRule::Adam,
            schedule,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: 5.0,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        })
    }

    pub fn with_rule(mut self, rule: UpdateRule) -> Self {
        self.rule = rule;
        self
    }

    /// Applies one update and bumps the parameter version. Fails without
    /// touching the parameters if any gradient is non-finite.
    pub fn apply(&mut self, params: &mut RetrieverParams, grads: &Grads) -> Result<()> {
        let mut g = grads.flatten();
        if let Some(i) = g.iter().position(|x| !x.is_finite()) {
            return Err(RarError::NonFinite(format!(
                "gradient entry {i} at optimizer step {} is {}",
                self.step, g[i]
            )));
        }
        if self.clip_norm > 0.0 {
            let norm = g.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > self.clip_norm {
                let k = self.clip_norm / norm;
                g.iter_mut().for_each(|x| *x *= k);
            }
        }
        let mut theta = params.flatten();
        let lr = self.schedule.lr(self.step);
        self.step += 1;
        if self.rule == UpdateRule::Sgd {
            theta.iter_mut().zip(&g).for_each(|(t, gi)| *t -= lr * gi);
            params.assign_flat(&theta);
            params.version += 1;
            return Ok(());
        }
        if self.m.len() != theta.len() {
            self.m = vec![0.0; theta.len()];
            self.v = vec![0.0; theta.len()];
        }
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for i in 0..theta.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g[i] * g[i];
            let mh = self.m[i] / bc1;
            let vh = self.v[i] / bc2;
            theta[i] -= lr * mh / (vh.sqrt() + self.eps);
        }
        params.assign_flat(&theta);
        params.version += 1;
        Ok(())
    }
}
