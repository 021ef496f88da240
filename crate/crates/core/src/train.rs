//! Shared optimization loop plumbing: step records, duration-budgeted batch
//! streams and the Adam driver used by every trainer.

use std::collections::VecDeque;

use crate::data::pack_durations;
use crate::error::{Error, Result};
use crate::nn::{Adam, AdamConfig, Binder, Gradients, LrSchedule, ParamSet};
use crate::rng::Rng;
use crate::tensor::{Tape, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOptions {
    pub steps: usize,
    pub seed: u64,
    /// Total audio per batch.
    pub batch_seconds: f64,
    pub lr_high: f32,
    pub lr_low: f32,
    /// Fraction of `steps` after which `lr_low` is used.
    pub switch_fraction: f64,
}

impl TrainOptions {
    pub fn new(steps: usize, seed: u64, batch_seconds: f64) -> Self {
        let s = LrSchedule::new(steps);
        Self {
            steps,
            seed,
            batch_seconds,
            lr_high: s.lr_high,
            lr_low: s.lr_low,
            switch_fraction: s.switch_fraction,
        }
    }

    pub fn schedule(&self) -> LrSchedule {
        LrSchedule {
            lr_high: self.lr_high,
            lr_low: self.lr_low,
            switch_fraction: self.switch_fraction,
            total_steps: self.steps,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.batch_seconds > 0.0) {
            return Err(Error::Config("batch duration must be positive".into()));
        }
        if !(self.lr_high > 0.0 && self.lr_low > 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.switch_fraction) {
            return Err(Error::Config("learning-rate switch fraction must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// One optimizer update. `loss` is the optimized value; `components` are
/// its logged parts.
#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub loss: f32,
    pub components: Vec<f32>,
}

impl StepRecord {
    /// `step<TAB>loss[<TAB>component...]`
    pub fn log_line(&self) -> String {
        let mut s = format!("{}\t{:.6}", self.step, self.loss);
        for c in &self.components {
            s.push_str(&format!("\t{c:.6}"));
        }
        s
    }
}

/// Endless sequence of duration-budgeted batches, reshuffled every epoch.
pub struct BatchStream {
    durations: Vec<f64>,
    budget: f64,
    rng: Rng,
    pending: VecDeque<Vec<usize>>,
}

impl BatchStream {
    pub fn new(durations: Vec<f64>, budget: f64, rng: Rng) -> Result<Self> {
        if durations.is_empty() {
            return Err(Error::Config("training corpus is empty".into()));
        }
        let mut stream = Self { durations, budget, rng, pending: VecDeque::new() };
        stream.refill()?;
        Ok(stream)
    }

    fn refill(&mut self) -> Result<()> {
        self.pending.extend(pack_durations(&self.durations, self.budget, &mut self.rng)?);
        Ok(())
    }

    pub fn next_batch(&mut self) -> Result<Vec<usize>> {
        if self.pending.is_empty() {
            self.refill()?;
        }
        Ok(self.pending.pop_front().expect("refill yields at least one batch"))
    }
}

/// Runs `options.steps` Adam updates. `step_fn` builds the loss for one
/// update on the given binder and returns it with its logged components.
pub(crate) fn optimize<F>(params: &mut ParamSet, options: &TrainOptions, mut step_fn: F) -> Result<Vec<StepRecord>>
where
    F: FnMut(usize, &Binder) -> Result<(Tensor, Vec<f32>)>,
{
    options.validate()?;
    let mut adam = Adam::new(AdamConfig::default(), options.schedule());
    let mut records = Vec::with_capacity(options.steps);
    for step in 0..options.steps {
        let tape = Tape::new();
        let (loss_value, components, grads) = {
            let binder = Binder::new(&tape, params);
            let (loss, components) = step_fn(step, &binder)?;
            let value = loss.item();
            if !value.is_finite() {
                return Err(Error::Contract(format!("loss became non-finite at step {step}")));
            }
            tape.backward(&loss)?;
            let mut grads = binder.gradients();
            fill_missing(params, &mut grads);
            (value, components, grads)
        };
        adam.step(params, &grads)?;
        log::debug!("step {step} loss {loss_value:.5}");
        records.push(StepRecord { step, loss: loss_value, components });
    }
    Ok(records)
}

/// Parameters the step never touched receive zero gradient.
fn fill_missing(params: &ParamSet, grads: &mut Gradients) {
    for (name, p) in params.iter() {
        grads.entry(name.clone()).or_insert_with(|| vec![0.0; p.data.len()]);
    }
}
