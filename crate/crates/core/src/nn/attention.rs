use super::{Binder, Linear, Param, ParamSet};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{ReduceOp, Tensor};

const LAYER_NORM_EPS: f32 = 1e-5;

/// Row-wise layer normalization of `x: [n × d]` with affine `gamma`, `beta`.
pub fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor) -> Result<Tensor> {
    let mean = x.reduce_keepdim(ReduceOp::Mean, 1)?;
    let centered = x.sub(&mean)?;
    let var = centered.square().reduce_keepdim(ReduceOp::Mean, 1)?;
    let std = var.add_scalar(LAYER_NORM_EPS).sqrt();
    centered.div(&std)?.mul(gamma)?.add(beta)
}

/// Sinusoidal position table, `[len × dim]` row-major.
pub fn sinusoidal_positions(len: usize, dim: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; len * dim];
    for t in 0..len {
        for i in 0..dim {
            let pair = (i / 2) as f64;
            let freq = 1.0 / 10000f64.powf(2.0 * pair / dim as f64);
            let angle = t as f64 * freq;
            out[t * dim + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() } as f32;
        }
    }
    out
}

/// Post-norm transformer block: multi-head self-attention over the whole
/// sequence, residual, layer norm, position-wise feed-forward, residual,
/// layer norm.
#[derive(Clone, Debug)]
pub struct SelfAttentionBlock {
    pub name: String,
    pub dim: usize,
    pub heads: usize,
    query: Linear,
    key: Linear,
    value: Linear,
    out: Linear,
    ff_in: Linear,
    ff_out: Linear,
}

pub struct AttentionOutput {
    pub output: Tensor,
    /// Per head, `[queries × keys]` softmax weights.
    pub weights: Vec<Tensor>,
}

impl SelfAttentionBlock {
    pub fn new(params: &mut ParamSet, name: &str, dim: usize, heads: usize, ffn_dim: usize, rng: &mut Rng) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::Config(format!("{name}: width {dim} is not divisible by {heads} heads")));
        }
        let query = Linear::new(params, &format!("{name}.query"), dim, dim, true, rng);
        let key = Linear::new(params, &format!("{name}.key"), dim, dim, true, rng);
        let value = Linear::new(params, &format!("{name}.value"), dim, dim, true, rng);
        let out = Linear::new(params, &format!("{name}.out"), dim, dim, true, rng);
        let ff_in = Linear::new(params, &format!("{name}.ff_in"), dim, ffn_dim, true, rng);
        let ff_out = Linear::new(params, &format!("{name}.ff_out"), ffn_dim, dim, true, rng);
        for ln in ["ln1", "ln2"] {
            params.insert(format!("{name}.{ln}.gamma"), Param::filled(&[dim], 1.0));
            params.insert(format!("{name}.{ln}.beta"), Param::filled(&[dim], 0.0));
        }
        Ok(Self {
            name: name.to_string(),
            dim,
            heads,
            query,
            key,
            value,
            out,
            ff_in,
            ff_out,
        })
    }

    pub fn forward(&self, b: &Binder, x: &Tensor) -> Result<AttentionOutput> {
        let (_, d) = x.dims2()?;
        if d != self.dim {
            return Err(Error::dim(format!("{} expects width {}, got {d}", self.name, self.dim)));
        }
        let head_dim = self.dim / self.heads;
        let q = self.query.forward(b, x)?;
        let k = self.key.forward(b, x)?;
        let v = self.value.forward(b, x)?;
        let scale = 1.0 / (head_dim as f32).sqrt();

        let mut contexts = Vec::with_capacity(self.heads);
        let mut weights = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = q.narrow(1, h * head_dim, head_dim)?;
            let kh = k.narrow(1, h * head_dim, head_dim)?;
            let vh = v.narrow(1, h * head_dim, head_dim)?;
            let scores = qh.matmul(&kh.transpose()?)?.scale(scale);
            let attn = scores.softmax(1)?;
            contexts.push(attn.matmul(&vh)?);
            weights.push(attn);
        }
        let refs: Vec<&Tensor> = contexts.iter().collect();
        let attended = self.out.forward(b, &b.tape().concat(&refs, 1)?)?;

        let ln = |which: &str, t: &Tensor| -> Result<Tensor> {
            let gamma = b.get(&format!("{}.{which}.gamma", self.name))?;
            let beta = b.get(&format!("{}.{which}.beta", self.name))?;
            layer_norm(t, &gamma, &beta)
        };
        let h1 = ln("ln1", &x.add(&attended)?)?;
        let ff = self.ff_out.forward(b, &self.ff_in.forward(b, &h1)?.relu())?;
        let output = ln("ln2", &h1.add(&ff)?)?;
        Ok(AttentionOutput { output, weights })
    }
}

/// Transformer context network: optional sinusoidal positions, then blocks.
#[derive(Clone, Debug)]
pub struct AttentionStack {
    pub blocks: Vec<SelfAttentionBlock>,
    pub positional: bool,
}

impl AttentionStack {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        params: &mut ParamSet,
        name: &str,
        dim: usize,
        heads: usize,
        ffn_dim: usize,
        num_blocks: usize,
        positional: bool,
        rng: &mut Rng,
    ) -> Result<Self> {
        let blocks = (0..num_blocks)
            .map(|i| SelfAttentionBlock::new(params, &format!("{name}.{i}"), dim, heads, ffn_dim, rng))
            .collect::<Result<_>>()?;
        Ok(Self { blocks, positional })
    }

    pub fn forward(&self, b: &Binder, x: &Tensor) -> Result<Tensor> {
        let (len, dim) = x.dims2()?;
        let mut h = if self.positional {
            let pe = b.tape().constant(sinusoidal_positions(len, dim), &[len, dim])?;
            x.add(&pe)?
        } else {
            x.clone()
        };
        for block in &self.blocks {
            h = block.forward(b, &h)?.output;
        }
        Ok(h)
    }
}
