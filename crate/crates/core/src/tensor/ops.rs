use super::kernels;
use super::{Op, Tape, Tensor};
use crate::error::{Error, Result};

/// Elementwise single-input operations.
#[derive(Clone, Copy, Debug)]
pub enum UnaryOp {
    Neg,
    Exp,
    /// Non-positive inputs yield NaN / -inf, which propagate.
    Log,
    Sigmoid,
    /// Numerically stable `ln σ(x)`.
    LogSigmoid,
    Tanh,
    Relu,
    /// `min(max(x, 0), cap)`
    ReluClipped(f32),
    Scale(f32),
    AddScalar(f32),
    Sqrt,
    Square,
    /// Caller-supplied value and derivative; used for tests of the checker.
    Custom {
        f: fn(f32) -> f32,
        df: fn(f32) -> f32,
    },
}

impl UnaryOp {
    pub(crate) fn apply(self, x: f32) -> f32 {
        match self {
            UnaryOp::Neg => -x,
            UnaryOp::Exp => x.exp(),
            UnaryOp::Log => x.ln(),
            UnaryOp::Sigmoid => sigmoid(x),
            UnaryOp::LogSigmoid => log_sigmoid(x),
            UnaryOp::Tanh => x.tanh(),
            UnaryOp::Relu => x.max(0.0),
            UnaryOp::ReluClipped(cap) => x.max(0.0).min(cap),
            UnaryOp::Scale(c) => x * c,
            UnaryOp::AddScalar(c) => x + c,
            UnaryOp::Sqrt => x.sqrt(),
            UnaryOp::Square => x * x,
            UnaryOp::Custom { f, .. } => f(x),
        }
    }

    /// Derivative given input `x` and output `y`.
    pub(crate) fn derivative(self, x: f32, y: f32) -> f32 {
        match self {
            UnaryOp::Neg => -1.0,
            UnaryOp::Exp => y,
            UnaryOp::Log => 1.0 / x,
            UnaryOp::Sigmoid => y * (1.0 - y),
            UnaryOp::LogSigmoid => sigmoid(-x),
            UnaryOp::Tanh => 1.0 - y * y,
            UnaryOp::Relu => (x > 0.0) as u8 as f32,
            UnaryOp::ReluClipped(cap) => (x > 0.0 && x < cap) as u8 as f32,
            UnaryOp::Scale(c) => c,
            UnaryOp::AddScalar(_) => 1.0,
            UnaryOp::Sqrt => 0.5 / y,
            UnaryOp::Square => 2.0 * x,
            UnaryOp::Custom { df, .. } => df(x),
        }
    }
}

pub(crate) fn sigmoid(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn log_sigmoid(x: f32) -> f32 {
    // ln σ(x) = -softplus(-x)
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

/// Elementwise two-input operations with trailing-dimension broadcasting.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
    Div,
}

impl BinaryOp {
    fn apply(self, a: f32, b: f32) -> f32 {
        match self {
            BinaryOp::Add => a + b,
            BinaryOp::Sub => a - b,
            BinaryOp::Mul => a * b,
            BinaryOp::Div => a / b,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReduceOp {
    Sum,
    Mean,
    Max,
    LogSumExp,
}

pub(crate) fn reduce_lane(op: ReduceOp, lane: impl Iterator<Item = f32> + Clone, n: usize) -> f32 {
    match op {
        ReduceOp::Sum => lane.map(f64::from).sum::<f64>() as f32,
        ReduceOp::Mean => (lane.map(f64::from).sum::<f64>() / n as f64) as f32,
        ReduceOp::Max => lane.fold(f32::NEG_INFINITY, f32::max),
        ReduceOp::LogSumExp => {
            let m = lane.clone().fold(f32::NEG_INFINITY, f32::max);
            if m == f32::NEG_INFINITY || !m.is_finite() {
                return m;
            }
            let s: f64 = lane.map(|v| ((v - m) as f64).exp()).sum();
            (m as f64 + s.ln()) as f32
        }
    }
}

impl Tensor {
    fn same_tape(&self, other: &Tensor) -> Result<()> {
        other.check_tape(&self.tape)
    }

    pub fn unary(&self, op: UnaryOp) -> Tensor {
        let (value, shape, rg) = self.node(|n| {
            let value = n.value.iter().map(|&x| op.apply(x)).collect::<Vec<_>>();
            (value, n.shape.clone(), n.requires_grad)
        });
        self.tape.push(value, shape, Op::Unary { x: self.id, op }, rg)
    }

    pub fn binary(&self, op: BinaryOp, other: &Tensor) -> Result<Tensor> {
        self.same_tape(other)?;
        let (value, shape, rg) = self.tape.with_inner(|inner| {
            let a = &inner.nodes[self.id];
            let b = &inner.nodes[other.id];
            let out_shape = kernels::broadcast_shape(&a.shape, &b.shape).ok_or_else(|| {
                Error::dim(format!("cannot broadcast {:?} with {:?}", a.shape, b.shape))
            })?;
            let value = if a.shape == b.shape {
                a.value.iter().zip(&b.value).map(|(&x, &y)| op.apply(x, y)).collect()
            } else if b.value.len() == 1 && out_shape == a.shape {
                let y = b.value[0];
                a.value.iter().map(|&x| op.apply(x, y)).collect()
            } else {
                let sa = kernels::broadcast_strides(&a.shape, &out_shape);
                let sb = kernels::broadcast_strides(&b.shape, &out_shape);
                let mut out = vec![0.0f32; out_shape.iter().product()];
                kernels::for_each_broadcast(&out_shape, &sa, &sb, |i, ia, ib| {
                    out[i] = op.apply(a.value[ia], b.value[ib]);
                });
                out
            };
            Ok::<_, Error>((value, out_shape, a.requires_grad || b.requires_grad))
        })?;
        Ok(self.tape.push(value, shape, Op::Binary { a: self.id, b: other.id, op }, rg))
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(BinaryOp::Add, other)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(BinaryOp::Sub, other)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(BinaryOp::Mul, other)
    }

    pub fn div(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(BinaryOp::Div, other)
    }

    pub fn neg(&self) -> Tensor {
        self.unary(UnaryOp::Neg)
    }

    pub fn exp(&self) -> Tensor {
        self.unary(UnaryOp::Exp)
    }

    pub fn log(&self) -> Tensor {
        self.unary(UnaryOp::Log)
    }

    pub fn sigmoid(&self) -> Tensor {
        self.unary(UnaryOp::Sigmoid)
    }

    pub fn log_sigmoid(&self) -> Tensor {
        self.unary(UnaryOp::LogSigmoid)
    }

    pub fn tanh(&self) -> Tensor {
        self.unary(UnaryOp::Tanh)
    }

    pub fn relu(&self) -> Tensor {
        self.unary(UnaryOp::Relu)
    }

    pub fn relu_clipped(&self, cap: f32) -> Tensor {
        self.unary(UnaryOp::ReluClipped(cap))
    }

    pub fn scale(&self, c: f32) -> Tensor {
        self.unary(UnaryOp::Scale(c))
    }

    pub fn add_scalar(&self, c: f32) -> Tensor {
        self.unary(UnaryOp::AddScalar(c))
    }

    pub fn sqrt(&self) -> Tensor {
        self.unary(UnaryOp::Sqrt)
    }

    pub fn square(&self) -> Tensor {
        self.unary(UnaryOp::Square)
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        self.same_tape(other)?;
        let (m, k) = self.dims2()?;
        let (k2, n) = other.dims2()?;
        if k != k2 {
            return Err(Error::dim(format!("matmul inner dimensions differ: {m}×{k} · {k2}×{n}")));
        }
        let (value, rg) = self.tape.with_inner(|inner| {
            let a = &inner.nodes[self.id];
            let b = &inner.nodes[other.id];
            (kernels::matmul(&a.value, &b.value, m, k, n), a.requires_grad || b.requires_grad)
        });
        Ok(self.tape.push(value, vec![m, n], Op::MatMul { a: self.id, b: other.id }, rg))
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let (r, c) = self.dims2()?;
        let (value, rg) = self.node(|n| {
            let mut out = vec![0.0f32; r * c];
            for i in 0..r {
                for j in 0..c {
                    out[j * r + i] = n.value[i * c + j];
                }
            }
            (out, n.requires_grad)
        });
        Ok(self.tape.push(value, vec![c, r], Op::Transpose { x: self.id }, rg))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if numel != self.numel() {
            return Err(Error::dim(format!("cannot reshape {:?} to {shape:?}", self.shape())));
        }
        let (value, rg) = self.node(|n| (n.value.clone(), n.requires_grad));
        Ok(self.tape.push(value, shape.to_vec(), Op::Reshape { x: self.id }, rg))
    }

    /// Reduces along `axis`, removing it from the shape.
    pub fn reduce(&self, op: ReduceOp, axis: usize) -> Result<Tensor> {
        let shape = self.shape();
        if axis >= shape.len() {
            return Err(Error::dim(format!("axis {axis} out of range for shape {shape:?}")));
        }
        let (outer, n, inner) = kernels::axis_split(&shape, axis);
        let (value, rg) = self.node(|node| {
            let mut out = Vec::with_capacity(outer * inner);
            for o in 0..outer {
                for i in 0..inner {
                    let base = o * n * inner + i;
                    let lane = (0..n).map(|j| node.value[base + j * inner]);
                    out.push(reduce_lane(op, lane, n));
                }
            }
            (out, node.requires_grad)
        });
        let mut out_shape = shape;
        out_shape.remove(axis);
        Ok(self.tape.push(value, out_shape, Op::Reduce { x: self.id, op, axis }, rg))
    }

    /// Reduces along `axis`, keeping it with extent 1.
    pub fn reduce_keepdim(&self, op: ReduceOp, axis: usize) -> Result<Tensor> {
        let reduced = self.reduce(op, axis)?;
        let mut shape = self.shape();
        shape[axis] = 1;
        reduced.reshape(&shape)
    }

    pub fn sum(&self, axis: usize) -> Result<Tensor> {
        self.reduce(ReduceOp::Sum, axis)
    }

    pub fn mean(&self, axis: usize) -> Result<Tensor> {
        self.reduce(ReduceOp::Mean, axis)
    }

    pub fn max(&self, axis: usize) -> Result<Tensor> {
        self.reduce(ReduceOp::Max, axis)
    }

    pub fn logsumexp(&self, axis: usize) -> Result<Tensor> {
        self.reduce(ReduceOp::LogSumExp, axis)
    }

    /// Sum of every element as a scalar.
    pub fn sum_all(&self) -> Result<Tensor> {
        let flat = self.reshape(&[self.numel()])?;
        flat.sum(0)
    }

    pub fn log_softmax(&self, axis: usize) -> Result<Tensor> {
        let lse = self.reduce_keepdim(ReduceOp::LogSumExp, axis)?;
        self.sub(&lse)
    }

    pub fn softmax(&self, axis: usize) -> Result<Tensor> {
        Ok(self.log_softmax(axis)?.exp())
    }

    /// Slice `[start, start+len)` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Tensor> {
        let shape = self.shape();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(Error::dim(format!(
                "narrow({axis}, {start}, {len}) out of range for shape {shape:?}"
            )));
        }
        let (outer, n, inner) = kernels::axis_split(&shape, axis);
        let (value, rg) = self.node(|node| {
            let mut out = Vec::with_capacity(outer * len * inner);
            for o in 0..outer {
                let base = (o * n + start) * inner;
                out.extend_from_slice(&node.value[base..base + len * inner]);
            }
            (out, node.requires_grad)
        });
        let mut out_shape = shape;
        out_shape[axis] = len;
        Ok(self.tape.push(value, out_shape, Op::Narrow { x: self.id, axis, start }, rg))
    }

    /// Gathers slices along axis 0.
    pub fn index_select(&self, indices: &[usize]) -> Result<Tensor> {
        let shape = self.shape();
        if shape.is_empty() {
            return Err(Error::dim("index_select on a scalar"));
        }
        let rows = shape[0];
        if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
            return Err(Error::dim(format!("index {bad} out of range for {rows} rows")));
        }
        let row_len: usize = shape[1..].iter().product();
        let (value, rg) = self.node(|node| {
            let mut out = Vec::with_capacity(indices.len() * row_len);
            for &i in indices {
                out.extend_from_slice(&node.value[i * row_len..(i + 1) * row_len]);
            }
            (out, node.requires_grad)
        });
        let mut out_shape = shape;
        out_shape[0] = indices.len();
        Ok(self.tape.push(
            value,
            out_shape,
            Op::IndexSelect { x: self.id, indices: indices.into() },
            rg,
        ))
    }

    /// Reverses the order along axis 0.
    pub fn reverse_rows(&self) -> Result<Tensor> {
        let rows = *self.shape().first().ok_or_else(|| Error::dim("reverse of a scalar"))?;
        let idx: Vec<usize> = (0..rows).rev().collect();
        self.index_select(&idx)
    }

    /// Cosine similarity between corresponding rows of two `[n × d]` tensors.
    /// A zero-norm row has similarity 0 with everything.
    pub fn cosine_rows(&self, other: &Tensor) -> Result<Tensor> {
        self.same_tape(other)?;
        let (n, d) = self.dims2()?;
        if other.dims2()? != (n, d) {
            return Err(Error::dim(format!(
                "cosine_rows shapes differ: {:?} vs {:?}",
                self.shape(),
                other.shape()
            )));
        }
        let (value, rg) = self.tape.with_inner(|inner| {
            let a = &inner.nodes[self.id];
            let b = &inner.nodes[other.id];
            let out = (0..n)
                .map(|i| {
                    let ra = &a.value[i * d..(i + 1) * d];
                    let rb = &b.value[i * d..(i + 1) * d];
                    cosine(ra, rb).0 as f32
                })
                .collect();
            (out, a.requires_grad || b.requires_grad)
        });
        Ok(self.tape.push(value, vec![n], Op::CosineRows { a: self.id, b: other.id }, rg))
    }

    /// Forward value `hard`, gradient routed to `self` (the soft relaxation).
    pub fn straight_through(&self, hard: Vec<f32>) -> Result<Tensor> {
        if hard.len() != self.numel() {
            return Err(Error::dim("straight-through value has the wrong size"));
        }
        let (shape, rg) = self.node(|n| (n.shape.clone(), n.requires_grad));
        Ok(self.tape.push(hard, shape, Op::StraightThrough { soft: self.id }, rg))
    }

    /// Records a scalar `value` whose gradient with respect to `self` is
    /// already known.
    pub(crate) fn precomputed_scalar(&self, value: f32, grad: Vec<f32>) -> Tensor {
        debug_assert_eq!(grad.len(), self.numel());
        let rg = self.requires_grad();
        self.tape.push(vec![value], vec![], Op::Precomputed { x: self.id, grad: grad.into() }, rg)
    }
}

/// Returns (similarity, |a|, |b|) in f64.
pub(crate) fn cosine(a: &[f32], b: &[f32]) -> (f64, f64, f64) {
    let ab = kernels::dot(a, b);
    let na = kernels::dot(a, a).sqrt();
    let nb = kernels::dot(b, b).sqrt();
    let denom = na * nb;
    if denom == 0.0 {
        (0.0, na, nb)
    } else {
        ((ab / denom).clamp(-1.0, 1.0), na, nb)
    }
}

impl Tape {
    /// Concatenates tensors along `axis`; all other extents must agree.
    pub fn concat(&self, xs: &[&Tensor], axis: usize) -> Result<Tensor> {
        let first = xs.first().ok_or_else(|| Error::dim("concat of zero tensors"))?;
        let base_shape = first.shape();
        if axis >= base_shape.len() {
            return Err(Error::dim(format!("axis {axis} out of range for {base_shape:?}")));
        }
        let mut total = 0;
        for x in xs {
            x.check_tape(self)?;
            let s = x.shape();
            let compatible = s.len() == base_shape.len()
                && s.iter().zip(&base_shape).enumerate().all(|(d, (a, b))| d == axis || a == b);
            if !compatible {
                return Err(Error::dim(format!("concat shape mismatch: {base_shape:?} vs {s:?}")));
            }
            total += s[axis];
        }
        let (outer, _, inner) = kernels::axis_split(&base_shape, axis);
        let (value, rg) = self.with_inner(|inner_tape| {
            let mut out = Vec::with_capacity(outer * total * inner);
            let mut rg = false;
            for o in 0..outer {
                for x in xs {
                    let node = &inner_tape.nodes[x.id];
                    let n = node.shape[axis];
                    out.extend_from_slice(&node.value[o * n * inner..(o + 1) * n * inner]);
                }
            }
            for x in xs {
                rg |= inner_tape.nodes[x.id].requires_grad;
            }
            (out, rg)
        });
        let mut shape = base_shape;
        shape[axis] = total;
        Ok(self.push(
            value,
            shape,
            Op::Concat { xs: xs.iter().map(|x| x.id).collect(), axis },
            rg,
        ))
    }

    /// Valid cross-correlation of `x: [c_in × len]` with `w: [c_out × c_in × k]`
    /// plus bias `b: [c_out]`, with symmetric zero padding.
    pub fn conv1d(&self, x: &Tensor, w: &Tensor, b: &Tensor, stride: usize, padding: usize) -> Result<Tensor> {
        for t in [x, w, b] {
            t.check_tape(self)?;
        }
        let (c_in, len) = x.dims2()?;
        let wshape = w.shape();
        let [c_out, wc_in, kernel] = wshape[..] else {
            return Err(Error::dim(format!("conv weight must be rank 3, got {wshape:?}")));
        };
        if wc_in != c_in || b.shape() != [c_out] {
            return Err(Error::dim(format!(
                "conv input has {c_in} channels, weight {wshape:?}, bias {:?}",
                b.shape()
            )));
        }
        if stride == 0 {
            return Err(Error::Config("conv stride must be positive".into()));
        }
        if len + 2 * padding < kernel {
            return Err(Error::InputTooShort {
                required: kernel.saturating_sub(2 * padding),
                actual: len,
            });
        }
        let l_out = (len + 2 * padding - kernel) / stride + 1;
        let (value, rg) = self.with_inner(|inner| {
            let xv = &inner.nodes[x.id];
            let wv = &inner.nodes[w.id];
            let bv = &inner.nodes[b.id];
            let cols = kernels::im2col(&xv.value, c_in, len, kernel, stride, padding, l_out);
            let mut out = kernels::matmul(&wv.value, &cols, c_out, c_in * kernel, l_out);
            for (row, &bias) in out.chunks_mut(l_out).zip(&bv.value) {
                row.iter_mut().for_each(|v| *v += bias);
            }
            (out, xv.requires_grad || wv.requires_grad || bv.requires_grad)
        });
        Ok(self.push(
            value,
            vec![c_out, l_out],
            Op::Conv1d { x: x.id, w: w.id, b: b.id, stride, padding },
            rg,
        ))
    }

    /// Group normalization of `x: [c × len]`: statistics per group of
    /// `c / groups` channels over all time steps (biased variance), then a
    /// per-channel affine map.
    pub fn group_norm(&self, x: &Tensor, gamma: &Tensor, beta: &Tensor, groups: usize, eps: f32) -> Result<Tensor> {
        for t in [x, gamma, beta] {
            t.check_tape(self)?;
        }
        let (c, len) = x.dims2()?;
        if groups == 0 || c % groups != 0 {
            return Err(Error::dim(format!("{c} channels not divisible into {groups} groups")));
        }
        if gamma.shape() != [c] || beta.shape() != [c] {
            return Err(Error::dim(format!("group norm affine parameters must have shape [{c}]")));
        }
        let per_group = c / groups * len;
        let (value, stats, rg) = self.with_inner(|inner| {
            let xv = &inner.nodes[x.id];
            let g = &inner.nodes[gamma.id];
            let bt = &inner.nodes[beta.id];
            let mut out = vec![0.0f32; c * len];
            let mut stats = Vec::with_capacity(groups);
            for grp in 0..groups {
                let lane = &xv.value[grp * per_group..(grp + 1) * per_group];
                let mean = lane.iter().map(|&v| v as f64).sum::<f64>() / per_group as f64;
                let var = lane.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / per_group as f64;
                let rstd = 1.0 / (var + eps as f64).sqrt();
                stats.push((mean as f32, rstd as f32));
                let ch_per = c / groups;
                for ch in grp * ch_per..(grp + 1) * ch_per {
                    let (gm, bb) = (g.value[ch] as f64, bt.value[ch] as f64);
                    for t in 0..len {
                        let xhat = (xv.value[ch * len + t] as f64 - mean) * rstd;
                        out[ch * len + t] = (xhat * gm + bb) as f32;
                    }
                }
            }
            (out, stats, xv.requires_grad || g.requires_grad || bt.requires_grad)
        });
        Ok(self.push(
            value,
            vec![c, len],
            Op::GroupNorm { x: x.id, gamma: gamma.id, beta: beta.id, groups, stats: stats.into() },
            rg,
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn log_sigmoid_is_stable() {
        assert!((log_sigmoid(0.0) + std::f32::consts::LN_2).abs() < 1e-7);
        assert!(log_sigmoid(-200.0).is_finite());
        assert!((log_sigmoid(-200.0) + 200.0).abs() < 1e-3);
        assert!(log_sigmoid(100.0).abs() < 1e-30);
    }

    #[test]
    fn logsumexp_lane_handles_all_neg_inf() {
        let lane = [f32::NEG_INFINITY, f32::NEG_INFINITY];
        assert_eq!(reduce_lane(ReduceOp::LogSumExp, lane.iter().copied(), 2), f32::NEG_INFINITY);
    }
}
