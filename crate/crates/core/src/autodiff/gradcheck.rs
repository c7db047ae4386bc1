//! Central-difference verification of analytic gradients.

use super::{Graph, Var};
use crate::error::{contract, Result};
use crate::tensor::Tensor;

/// Relative errors use `max(|analytic|, |numeric|, REL_FLOOR)` as denominator.
pub const REL_FLOOR: f64 = 1e-8;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// Flat coordinate with the largest relative error.
    pub worst_index: usize,
    pub coords: Vec<usize>,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error < tol
    }
}

fn eval_scalar<F>(f: &F, x: &Tensor) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let v = g.constant(x.clone());
    let out = f(&mut g, v)?;
    let val = g.value(out);
    if val.numel() != 1 {
        return Err(contract(format!(
            "grad_check needs a scalar function, got shape {:?}",
            val.shape()
        )));
    }
    Ok(val.item())
}

/// Checks every coordinate of `x`.
pub fn grad_check<F>(f: F, x: &Tensor, h: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let coords: Vec<usize> = (0..x.numel()).collect();
    grad_check_at(f, x, h, &coords)
}

/// Checks only the listed flat coordinates of `x`; useful when each
/// evaluation of `f` is expensive.
pub fn grad_check_at<F>(f: F, x: &Tensor, h: f64, coords: &[usize]) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    if h <= 0.0 {
        return Err(contract("grad_check step must be positive"));
    }
    let mut g = Graph::new();
    let xv = g.variable(x.clone());
    let out = f(&mut g, xv)?;
    if g.value(out).numel() != 1 {
        return Err(contract(format!(
            "grad_check needs a scalar function, got shape {:?}",
            g.shape(out)
        )));
    }
    g.backward(out)?;
    let full = g
        .grad(xv)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(x.shape()));

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        worst_index: coords.first().copied().unwrap_or(0),
        coords: coords.to_vec(),
        analytic: Vec::with_capacity(coords.len()),
        numeric: Vec::with_capacity(coords.len()),
    };
    let mut probe = x.clone();
    for &c in coords {
        let orig = probe.data()[c];
        probe.data_mut()[c] = orig + h;
        let fp = eval_scalar(&f, &probe)?;
        probe.data_mut()[c] = orig - h;
        let fm = eval_scalar(&f, &probe)?;
        probe.data_mut()[c] = orig;

        let num = (fp - fm) / (2.0 * h);
        let ana = full.data()[c];
        let abs = (ana - num).abs();
        let rel = abs / ana.abs().max(num.abs()).max(REL_FLOOR);
        if rel > report.max_rel_error {
            report.max_rel_error = rel;
            report.worst_index = c;
        }
        report.max_abs_error = report.max_abs_error.max(abs);
        report.analytic.push(ana);
        report.numeric.push(num);
    }
    Ok(report)
}
