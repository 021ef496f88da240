use std::collections::BTreeMap;

use super::{Gradients, ParamSet};
use crate::error::{Error, Result};

/// Two-phase step schedule: `lr_high` while `step < switch_fraction · total_steps`,
/// `lr_low` afterwards.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LrSchedule {
    pub lr_high: f32,
    pub lr_low: f32,
    pub switch_fraction: f64,
    pub total_steps: usize,
}

impl LrSchedule {
    pub fn new(total_steps: usize) -> Self {
        Self {
            lr_high: 3e-4,
            lr_low: 5e-5,
            switch_fraction: 0.5,
            total_steps,
        }
    }

    /// Learning rate for the zero-based update index `step`.
    pub fn lr_at(&self, step: usize) -> f32 {
        if (step as f64) < self.switch_fraction * self.total_steps as f64 {
            self.lr_high
        } else {
            self.lr_low
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f32,
    pub beta2: f32,
    pub epsilon: f32,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }
}

#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    pub schedule: LrSchedule,
    step: usize,
    first: BTreeMap<String, Vec<f32>>,
    second: BTreeMap<String, Vec<f32>>,
}

impl Adam {
    pub fn new(config: AdamConfig, schedule: LrSchedule) -> Self {
        Self {
            config,
            schedule,
            step: 0,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
        }
    }

    /// Number of updates applied so far.
    pub fn steps_taken(&self) -> usize {
        self.step
    }

    pub fn current_lr(&self) -> f32 {
        self.schedule.lr_at(self.step)
    }

    /// One bias-corrected update of every parameter. Every parameter must have
    /// a gradient.
    pub fn step(&mut self, params: &mut ParamSet, grads: &Gradients) -> Result<()> {
        for (name, p) in params.iter() {
            match grads.get(name) {
                Some(g) if g.len() == p.data.len() => {}
                Some(g) => {
                    return Err(Error::Contract(format!(
                        "gradient for {name} has {} values, parameter has {}",
                        g.len(),
                        p.data.len()
                    )))
                }
                None => return Err(Error::Contract(format!("missing gradient for {name}"))),
            }
        }
        let lr = self.schedule.lr_at(self.step) as f64;
        self.step += 1;
        let AdamConfig { beta1, beta2, epsilon } = self.config;
        let (b1, b2) = (beta1 as f64, beta2 as f64);
        let c1 = 1.0 - b1.powi(self.step as i32);
        let c2 = 1.0 - b2.powi(self.step as i32);
        for (name, p) in params.iter_mut() {
            let g = &grads[name];
            let m = self.first.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            let v = self.second.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            for i in 0..g.len() {
                let gi = g[i] as f64;
                let mi = b1 * m[i] as f64 + (1.0 - b1) * gi;
                let vi = b2 * v[i] as f64 + (1.0 - b2) * gi * gi;
                m[i] = mi as f32;
                v[i] = vi as f32;
                let update = lr * (mi / c1) / ((vi / c2).sqrt() + epsilon as f64);
                p.data[i] = (p.data[i] as f64 - update) as f32;
            }
        }
        Ok(())
    }
}
