//! Layers, parameter storage and the optimizer.
//!
//! Parameters live outside any tape in a [`ParamSet`] keyed by name. A
//! forward pass binds them onto a fresh tape through a [`Binder`]; after
//! `backward` the binder hands back the gradients by the same names.

mod adam;
mod attention;
mod conv;
mod linear;
mod lstm;

use std::cell::RefCell;
use std::collections::BTreeMap;

use rand::Rng as _;

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{grad_check, GradCheckReport, Tape, Tensor};

pub use adam::{Adam, AdamConfig, LrSchedule};
pub use attention::{layer_norm, sinusoidal_positions, AttentionOutput, AttentionStack, SelfAttentionBlock};
pub(crate) use conv::conv_output_len;
pub use conv::{Conv1dLayer, GroupNormLayer, GROUP_NORM_EPS};
pub use linear::Linear;
pub use lstm::{Direction, LstmLayer, LstmStack};

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl Param {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::dim(format!("param shape {shape:?} does not hold {} values", data.len())));
        }
        Ok(Self { shape, data })
    }

    pub fn filled(shape: &[usize], value: f32) -> Self {
        let n = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![value; n] }
    }

    /// Uniform in `±bound`.
    pub fn uniform(shape: &[usize], bound: f32, rng: &mut Rng) -> Self {
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.random_range(-bound..=bound)).collect();
        Self { shape: shape.to_vec(), data }
    }
}

/// Named parameters in a deterministic (sorted) order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    map: BTreeMap<String, Param>,
}

pub type Gradients = BTreeMap<String, Vec<f32>>;

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, param: Param) {
        self.map.insert(name.into(), param);
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.map.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.map.get_mut(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<Param> {
        self.map.remove(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param)> {
        self.map.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Param)> {
        self.map.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_elements(&self) -> usize {
        self.map.values().map(|p| p.data.len()).sum()
    }

    /// Scalar count of parameters whose name starts with `prefix`.
    pub fn num_elements_with_prefix(&self, prefix: &str) -> usize {
        self.map
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(_, p)| p.data.len())
            .sum()
    }
}

/// Binds parameters onto a tape on first use.
pub struct Binder<'a> {
    tape: &'a Tape,
    params: &'a ParamSet,
    bound: RefCell<BTreeMap<String, Tensor>>,
}

impl<'a> Binder<'a> {
    pub fn new(tape: &'a Tape, params: &'a ParamSet) -> Self {
        Self { tape, params, bound: RefCell::new(BTreeMap::new()) }
    }

    /// A binder whose parameters are already the given tape tensors.
    pub fn prebound(tape: &'a Tape, params: &'a ParamSet, leaves: impl IntoIterator<Item = (String, Tensor)>) -> Self {
        Self { tape, params, bound: RefCell::new(leaves.into_iter().collect()) }
    }

    pub fn tape(&self) -> &'a Tape {
        self.tape
    }

    pub fn params(&self) -> &'a ParamSet {
        self.params
    }

    pub fn get(&self, name: &str) -> Result<Tensor> {
        if let Some(t) = self.bound.borrow().get(name) {
            return Ok(t.clone());
        }
        let p = self
            .params
            .get(name)
            .ok_or_else(|| Error::Contract(format!("unknown parameter {name}")))?;
        let t = self.tape.leaf(p.data.clone(), &p.shape, true)?;
        self.bound.borrow_mut().insert(name.to_string(), t.clone());
        Ok(t)
    }

    /// Gradients of every parameter bound so far. Call after `backward`.
    pub fn gradients(&self) -> Gradients {
        self.bound
            .borrow()
            .iter()
            .filter_map(|(k, t)| t.grad().map(|g| (k.clone(), g)))
            .collect()
    }
}

/// Adds `src` into `dst` name by name.
pub fn accumulate(dst: &mut Gradients, src: Gradients) {
    for (k, g) in src {
        match dst.get_mut(&k) {
            Some(d) => d.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
            None => {
                dst.insert(k, g);
            }
        }
    }
}

/// Finite-difference check of `f` with respect to every parameter in `params`.
pub fn grad_check_params<F>(params: &ParamSet, f: F, step: f32, rtol: f64) -> Result<GradCheckReport>
where
    F: Fn(&Binder) -> Result<Tensor>,
{
    let names: Vec<String> = params.iter().map(|(k, _)| k.clone()).collect();
    let values: Vec<(Vec<f32>, Vec<usize>)> = params.iter().map(|(_, p)| (p.data.clone(), p.shape.clone())).collect();
    grad_check(
        |tape, leaves| {
            let binder = Binder::prebound(tape, params, names.iter().cloned().zip(leaves.iter().cloned()));
            f(&binder)
        },
        &values,
        step,
        rtol,
    )
}
