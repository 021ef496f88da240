use super::{Binder, Param, ParamSet};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    Forward,
    /// Reverse the input in time, run the forward recurrence, reverse the output.
    Backward,
}

/// Single LSTM layer over `[time × input_size]`.
///
/// Gate layout along the `4·hidden` axis is input, forget, cell, output.
/// The forget-gate bias starts at 1.
#[derive(Clone, Debug)]
pub struct LstmLayer {
    pub name: String,
    pub input_size: usize,
    pub hidden_size: usize,
    pub direction: Direction,
}

impl LstmLayer {
    pub fn new(
        params: &mut ParamSet,
        name: &str,
        input_size: usize,
        hidden_size: usize,
        direction: Direction,
        rng: &mut Rng,
    ) -> Self {
        let h = hidden_size;
        params.insert(
            format!("{name}.w_ih"),
            Param::uniform(&[input_size, 4 * h], 1.0 / (input_size as f32).sqrt(), rng),
        );
        params.insert(
            format!("{name}.w_hh"),
            Param::uniform(&[h, 4 * h], 1.0 / (h as f32).sqrt(), rng),
        );
        let mut bias = vec![0.0; 4 * h];
        bias[h..2 * h].iter_mut().for_each(|v| *v = 1.0);
        params.insert(format!("{name}.bias"), Param { shape: vec![4 * h], data: bias });
        Self {
            name: name.to_string(),
            input_size,
            hidden_size,
            direction,
        }
    }

    pub fn num_params(input_size: usize, hidden_size: usize) -> usize {
        4 * hidden_size * (input_size + hidden_size + 1)
    }

    pub fn forward(&self, b: &Binder, x: &Tensor) -> Result<Tensor> {
        let (steps, d) = x.dims2()?;
        if d != self.input_size {
            return Err(Error::dim(format!("{} expects width {}, got {d}", self.name, self.input_size)));
        }
        if steps == 0 {
            return Err(Error::dim(format!("{}: empty sequence", self.name)));
        }
        match self.direction {
            Direction::Forward => self.recurrence(b, x),
            Direction::Backward => self.recurrence(b, &x.reverse_rows()?)?.reverse_rows(),
        }
    }

    fn recurrence(&self, b: &Binder, x: &Tensor) -> Result<Tensor> {
        let h = self.hidden_size;
        let (steps, _) = x.dims2()?;
        let w_ih = b.get(&format!("{}.w_ih", self.name))?;
        let w_hh = b.get(&format!("{}.w_hh", self.name))?;
        let bias = b.get(&format!("{}.bias", self.name))?;
        let projected = x.matmul(&w_ih)?.add(&bias)?;

        let mut outputs = Vec::with_capacity(steps);
        let mut state: Option<(Tensor, Tensor)> = None;
        for t in 0..steps {
            let mut gates = projected.narrow(0, t, 1)?;
            if let Some((hidden, _)) = &state {
                gates = gates.add(&hidden.matmul(&w_hh)?)?;
            }
            let sig = gates.sigmoid();
            let input_gate = sig.narrow(1, 0, h)?;
            let output_gate = sig.narrow(1, 3 * h, h)?;
            let candidate = gates.narrow(1, 2 * h, h)?.tanh();
            let mut cell = input_gate.mul(&candidate)?;
            if let Some((_, prev_cell)) = &state {
                let forget_gate = sig.narrow(1, h, h)?;
                cell = cell.add(&forget_gate.mul(prev_cell)?)?;
            }
            let hidden = output_gate.mul(&cell.tanh())?;
            outputs.push(hidden.clone());
            state = Some((hidden, cell));
        }
        let refs: Vec<&Tensor> = outputs.iter().collect();
        b.tape().concat(&refs, 0)
    }
}

/// Stack of LSTM layers run in the same direction.
#[derive(Clone, Debug)]
pub struct LstmStack {
    pub layers: Vec<LstmLayer>,
}

impl LstmStack {
    pub fn new(
        params: &mut ParamSet,
        name: &str,
        input_size: usize,
        hidden_size: usize,
        num_layers: usize,
        direction: Direction,
        rng: &mut Rng,
    ) -> Self {
        let layers = (0..num_layers)
            .map(|i| {
                let in_size = if i == 0 { input_size } else { hidden_size };
                LstmLayer::new(params, &format!("{name}.{i}"), in_size, hidden_size, direction, rng)
            })
            .collect();
        Self { layers }
    }

    pub fn num_params(input_size: usize, hidden_size: usize, num_layers: usize) -> usize {
        (0..num_layers)
            .map(|i| LstmLayer::num_params(if i == 0 { input_size } else { hidden_size }, hidden_size))
            .sum()
    }

    pub fn output_size(&self) -> usize {
        self.layers.last().map_or(0, |l| l.hidden_size)
    }

    pub fn forward(&self, b: &Binder, x: &Tensor) -> Result<Tensor> {
        let mut h = x.clone();
        for layer in &self.layers {
            h = layer.forward(b, &h)?;
        }
        Ok(h)
    }
}
