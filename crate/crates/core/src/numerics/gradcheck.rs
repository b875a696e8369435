use crate::error::Result;

use super::graph::{Graph, Var};
use super::tensor::Tensor;

#[derive(Debug, Clone, Copy)]
pub struct GradCheckConfig {
    /// Central difference step.
    pub step: f64,
    /// Denominator floor for the relative error, so coordinates whose true
    /// gradient is ~0 are judged on absolute error.
    pub floor: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            step: 1e-5,
            floor: 1e-6,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub worst_index: usize,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error < tol
    }
}

/// Compare reverse-mode gradients of the scalar `f(x)` at `point` against
/// float64 central finite differences.
///
/// `f` receives a fresh graph and the leaf holding `x`, and must return a
/// one-element node.
pub fn grad_check<F>(f: F, point: &Tensor<f64>, cfg: GradCheckConfig) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let x = g.param(point.clone())?;
    let y = f(&mut g, x)?;
    let grads = g.backward(y)?;
    let analytic: Vec<f64> = match grads.get(x) {
        Some(t) => t.data().to_vec(),
        None => vec![0.0; point.len()],
    };

    let eval = |p: Tensor<f64>| -> Result<f64> {
        let mut g = Graph::new();
        let x = g.constant(p)?;
        let y = f(&mut g, x)?;
        Ok(g.value(y).item())
    };

    let mut numeric = Vec::with_capacity(point.len());
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        worst_index: 0,
        analytic: Vec::new(),
        numeric: Vec::new(),
    };
    for i in 0..point.len() {
        let mut plus = point.clone();
        plus.data_mut()[i] += cfg.step;
        let mut minus = point.clone();
        minus.data_mut()[i] -= cfg.step;
        let fd = (eval(plus)? - eval(minus)?) / (2.0 * cfg.step);
        let a = analytic[i];
        let abs = (a - fd).abs();
        let rel = abs / a.abs().max(fd.abs()).max(cfg.floor);
        if rel > report.max_rel_error {
            report.max_rel_error = rel;
            report.worst_index = i;
        }
        report.max_abs_error = report.max_abs_error.max(abs);
        numeric.push(fd);
    }
    report.analytic = analytic;
    report.numeric = numeric;
    Ok(report)
}
