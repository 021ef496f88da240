use super::{Binder, Param, ParamSet};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Affine map `y = x·W + b` on rows of `x: [n × in_dim]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub name: String,
    pub in_dim: usize,
    pub out_dim: usize,
    pub bias: bool,
}

impl Linear {
    pub fn new(params: &mut ParamSet, name: &str, in_dim: usize, out_dim: usize, bias: bool, rng: &mut Rng) -> Self {
        let bound = 1.0 / (in_dim as f32).sqrt();
        params.insert(format!("{name}.weight"), Param::uniform(&[in_dim, out_dim], bound, rng));
        if bias {
            params.insert(format!("{name}.bias"), Param::filled(&[out_dim], 0.0));
        }
        Self { name: name.to_string(), in_dim, out_dim, bias }
    }

    pub fn forward(&self, b: &Binder, x: &Tensor) -> Result<Tensor> {
        let (_, d) = x.dims2()?;
        if d != self.in_dim {
            return Err(Error::dim(format!("{} expects width {}, got {d}", self.name, self.in_dim)));
        }
        let y = x.matmul(&b.get(&format!("{}.weight", self.name))?)?;
        if self.bias {
            y.add(&b.get(&format!("{}.bias", self.name))?)
        } else {
            Ok(y)
        }
    }
}
