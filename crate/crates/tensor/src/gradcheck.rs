//! Central finite-difference verification of reverse-mode gradients.

use crate::error::{invalid, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Per input: `max|analytic - numeric| / max(max|analytic|, max|numeric|, 1e-8)`.
    pub max_rel_err: Vec<f64>,
    pub max_abs_err: Vec<f64>,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn worst(&self) -> f64 {
        self.max_rel_err.iter().copied().fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.worst() < self.tol
    }
}

/// Compares the reverse-mode gradient of the scalar built by `f` against
/// central differences `(f(x+h) - f(x-h)) / 2h`, element by element, for
/// every input tensor.
pub fn finite_diff_check<F>(f: F, inputs: &[Tensor], h: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    if !(h > 0.0) {
        return Err(invalid!("finite difference step must be positive"));
    }
    let eval = |values: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        let v = g.value(out);
        if v.numel() != 1 {
            return Err(invalid!("finite_diff_check needs a scalar function"));
        }
        Ok(v.item())
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    let grads = g.backward(out)?;

    let mut report = GradCheckReport { max_rel_err: Vec::new(), max_abs_err: Vec::new(), tol };
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (k, &v) in vars.iter().enumerate() {
        let analytic = grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(inputs[k].shape()));
        let mut numeric = vec![0.0; inputs[k].numel()];
        for (i, slot) in numeric.iter_mut().enumerate() {
            let x0 = inputs[k].data()[i];
            work[k].data_mut()[i] = x0 + h;
            let up = eval(&work)?;
            work[k].data_mut()[i] = x0 - h;
            let down = eval(&work)?;
            work[k].data_mut()[i] = x0;
            *slot = (up - down) / (2.0 * h);
        }
        let abs = analytic
            .data()
            .iter()
            .zip(&numeric)
            .fold(0.0f64, |m, (a, n)| m.max((a - n).abs()));
        let scale = analytic.max_abs().max(numeric.iter().fold(0.0f64, |m, v| m.max(v.abs()))).max(1e-8);
        report.max_abs_err.push(abs);
        report.max_rel_err.push(abs / scale);
    }
    Ok(report)
}
