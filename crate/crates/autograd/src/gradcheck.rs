//! Central finite-difference checking of tape gradients.

use std::fmt::Display;

use crate::{AutogradError, Graph, Result, Tensor, Var};

#[derive(Clone, Debug)]
pub struct GradcheckOptions {
    /// Central-difference step.
    pub step: f64,
    /// Per-coordinate relative error tolerance.
    pub rel_tol: f64,
    /// Denominator floor so coordinates with near-zero gradient are judged absolutely.
    pub abs_floor: f64,
    /// Probe at most this many coordinates (evenly strided); `None` probes all.
    pub max_probes: Option<usize>,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self { step: 1e-4, rel_tol: 1e-3, abs_floor: 1e-6, max_probes: None }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckReport {
    pub probed: usize,
    pub passed: usize,
    pub max_rel_err: f64,
    pub worst_index: usize,
}

impl GradcheckReport {
    pub fn pass_fraction(&self) -> f64 {
        if self.probed == 0 {
            1.0
        } else {
            self.passed as f64 / self.probed as f64
        }
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares the tape gradient of `f(input)` with central differences.
///
/// `f` receives a graph and the input node and must return a single-element loss.
pub fn check<F, E>(input: &Tensor<f64>, f: F, opts: &GradcheckOptions) -> Result<GradcheckReport>
where
    F: Fn(&mut Graph<f64>, Var) -> std::result::Result<Var, E>,
    E: Display,
{
    let eval = |x: Tensor<f64>| -> Result<f64> {
        let mut g = Graph::new();
        let v = g.constant(x);
        let loss = f(&mut g, v).map_err(|e| AutogradError::Callback(e.to_string()))?;
        Ok(g.value(loss).item())
    };

    let mut g = Graph::new();
    let x = g.param(input.clone());
    let loss = f(&mut g, x).map_err(|e| AutogradError::Callback(e.to_string()))?;
    let grads = g.backward(loss)?;
    let analytic = grads.get(x).cloned().unwrap_or_else(|| Tensor::zeros(input.shape()));

    let n = input.numel();
    let stride = match opts.max_probes {
        Some(m) if m > 0 && m < n => n.div_ceil(m),
        _ => 1,
    };
    let mut report = GradcheckReport { probed: 0, passed: 0, max_rel_err: 0.0, worst_index: 0 };
    for i in (0..n).step_by(stride) {
        let mut plus = input.clone();
        plus.data_mut()[i] += opts.step;
        let mut minus = input.clone();
        minus.data_mut()[i] -= opts.step;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * opts.step);
        let err = relative_error(analytic.data()[i], numeric, opts.abs_floor);
        report.probed += 1;
        if err <= opts.rel_tol {
            report.passed += 1;
        }
        if err > report.max_rel_err || !err.is_finite() {
            report.max_rel_err = err;
            report.worst_index = i;
        }
    }
    Ok(report)
}
