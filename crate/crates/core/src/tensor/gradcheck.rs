//! Central finite-difference gradient checking.

use super::{Tape, Tensor};
use crate::error::{Error, Result};

/// Gradient scale below which differences are compared absolutely.
pub const SCALE_FLOOR: f64 = 1e-2;

#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub index: usize,
    /// `max_i |analytic_i − numeric_i| / scale`, where `scale` is the largest
    /// analytic or numeric gradient magnitude across all checked parameters
    /// (at least [`SCALE_FLOOR`]). f32 storage puts an absolute noise floor on
    /// the numeric derivative, so errors are measured against the gradient
    /// scale of the whole function rather than of each tensor.
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub passed: bool,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    pub rtol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.params.iter().all(|p| p.passed)
    }

    pub fn worst(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_error).fold(0.0, f64::max)
    }
}

/// Compares the tape's gradients of the scalar `f(params)` against central
/// differences with the given `step`.
///
/// `f` is rebuilt on a fresh tape for every evaluation and must be
/// deterministic (seed any randomness inside it).
pub fn grad_check<F>(f: F, params: &[(Vec<f32>, Vec<usize>)], step: f32, rtol: f64) -> Result<GradCheckReport>
where
    F: Fn(&Tape, &[Tensor]) -> Result<Tensor>,
{
    let eval = |values: &[Vec<f32>], with_grad: bool| -> Result<(f64, Vec<Vec<f32>>)> {
        let tape = Tape::new();
        let leaves = values
            .iter()
            .zip(params)
            .map(|(v, (_, shape))| tape.leaf(v.clone(), shape, with_grad))
            .collect::<Result<Vec<_>>>()?;
        let loss = f(&tape, &leaves)?;
        if loss.numel() != 1 {
            return Err(Error::Contract("grad_check function must return a scalar".into()));
        }
        let value = loss.item() as f64;
        if !with_grad {
            return Ok((value, Vec::new()));
        }
        tape.backward(&loss)?;
        let grads = leaves
            .iter()
            .map(|l| l.grad().unwrap_or_else(|| vec![0.0; l.numel()]))
            .collect();
        Ok((value, grads))
    };

    let mut values: Vec<Vec<f32>> = params.iter().map(|(v, _)| v.clone()).collect();
    let (_, analytic) = eval(&values, true)?;

    let mut numerics = Vec::with_capacity(params.len());
    for p in 0..values.len() {
        let mut numeric = vec![0.0f64; values[p].len()];
        for i in 0..values[p].len() {
            let orig = values[p][i];
            let (up, down) = (orig + step, orig - step);
            values[p][i] = up;
            let (fp, _) = eval(&values, false)?;
            values[p][i] = down;
            let (fm, _) = eval(&values, false)?;
            values[p][i] = orig;
            numeric[i] = (fp - fm) / (up as f64 - down as f64);
        }
        numerics.push(numeric);
    }
    let scale = analytic
        .iter()
        .flatten()
        .map(|&a| (a as f64).abs())
        .chain(numerics.iter().flatten().map(|n| n.abs()))
        .fold(SCALE_FLOOR, f64::max);

    let mut report = Vec::with_capacity(params.len());
    for (p, numeric) in numerics.iter().enumerate() {
        let max_abs = analytic[p]
            .iter()
            .zip(numeric)
            .map(|(&a, &n)| (a as f64 - n).abs())
            .fold(0.0, f64::max);
        let rel = max_abs / scale;
        report.push(ParamCheck {
            index: p,
            max_rel_error: rel,
            max_abs_error: max_abs,
            passed: rel <= rtol && rel.is_finite(),
        });
    }
    Ok(GradCheckReport { params: report, rtol })
}
