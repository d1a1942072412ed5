//! Adam with step-decay and cosine learning-rate schedules.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::graph::Gradients;
use super::params::ParamStore;
use super::tensor::Tensor;
use super::DiffError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Schedule {
    /// Multiply the rate by `factor` at each milestone step.
    PiecewiseStep {
        milestones: Vec<u64>,
        factor: f64,
    },
    /// Half-cosine decay from the base rate to zero over `total_steps`.
    Cosine,
    Constant,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub schedule: Schedule,
    pub total_steps: u64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            learning_rate: 3e-4,
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
            schedule: Schedule::PiecewiseStep {
                milestones: vec![16_000, 32_000],
                factor: 0.5,
            },
            total_steps: 48_000,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<(), DiffError> {
        let bad = |reason: &str| Err(DiffError::InvalidConfig(reason.to_string()));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if !(self.beta1 > 0.0 && self.beta1 < 1.0 && self.beta2 > 0.0 && self.beta2 < 1.0) {
            return bad("betas must lie in (0, 1)");
        }
        if self.total_steps == 0 {
            return bad("total_steps must be positive");
        }
        if let Schedule::PiecewiseStep { milestones, factor } = &self.schedule {
            if milestones.windows(2).any(|w| w[0] >= w[1]) {
                return bad("milestones must be strictly increasing");
            }
            if !(*factor > 0.0 && *factor <= 1.0) {
                return bad("factor must lie in (0, 1]");
            }
        }
        Ok(())
    }

    /// Learning rate in effect after `step` completed updates.
    pub fn lr_at(&self, step: u64) -> f64 {
        match &self.schedule {
            Schedule::PiecewiseStep { milestones, factor } => {
                let passed = milestones.iter().filter(|&&m| step >= m).count() as i32;
                self.learning_rate * factor.powi(passed)
            }
            Schedule::Cosine => {
                let t = (step.min(self.total_steps)) as f64 / self.total_steps as f64;
                0.5 * self.learning_rate * (1.0 + (std::f64::consts::PI * t).cos())
            }
            Schedule::Constant => self.learning_rate,
        }
    }
}

/// First and second moment buffers for every trainable parameter.
#[derive(Clone, Debug)]
pub struct Adam {
    pub config: OptimConfig,
    moments: BTreeMap<String, (Tensor, Tensor)>,
    steps_taken: u64,
}

impl Adam {
    pub fn new(config: OptimConfig) -> Result<Self, DiffError> {
        config.validate()?;
        Ok(Self {
            config,
            moments: BTreeMap::new(),
            steps_taken: 0,
        })
    }

    pub fn current_lr(&self) -> f64 {
        self.config.lr_at(self.steps_taken)
    }

    pub fn steps_taken(&self) -> u64 {
        self.steps_taken
    }

    /// One update over the parameters accepted by `trainable`. Every such
    /// parameter must have a gradient; a NaN aborts before anything moves.
    pub fn step(
        &mut self,
        store: &mut ParamStore,
        grads: &Gradients,
        trainable: impl Fn(&str) -> bool,
    ) -> Result<(), DiffError> {
        let names: Vec<String> = store
            .names()
            .filter(|n| trainable(n))
            .map(String::from)
            .collect();
        for name in &names {
            let g = grads
                .get(name)
                .ok_or_else(|| DiffError::MissingGradient(name.clone()))?;
            if g.data().iter().any(|v| v.is_nan()) {
                return Err(DiffError::NanGradient(name.clone()));
            }
        }
        let lr = self.config.lr_at(self.steps_taken);
        let t = (self.steps_taken + 1) as i32;
        let (b1, b2, eps) = (self.config.beta1, self.config.beta2, self.config.eps);
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        for name in &names {
            let g = grads.get(name).expect("checked above");
            let value = store.get_mut(name).expect("name from store");
            let (m, v) = self
                .moments
                .entry(name.clone())
                .or_insert_with(|| (Tensor::zeros(g.shape()), Tensor::zeros(g.shape())));
            for (((p, &gi), mi), vi) in value
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mi = b1 * *mi + (1.0 - b1) * gi;
                *vi = b2 * *vi + (1.0 - b2) * gi * gi;
                let mhat = *mi / c1;
                let vhat = *vi / c2;
                *p -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        self.steps_taken += 1;
        store.bump_step();
        Ok(())
    }
}

/// Single Adam update on all parameters of `store`.
pub fn optimizer_step(
    store: &mut ParamStore,
    grads: &Gradients,
    adam: &mut Adam,
) -> Result<(), DiffError> {
    adam.step(store, grads, |_| true)
}
