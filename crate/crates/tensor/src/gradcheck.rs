//! Central finite-difference verification of reverse-mode gradients.

use crate::graph::{Graph, Var};
use crate::tensor::{Result, Tensor};

/// Outcome of a gradient check.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// (input index, flat element index) of the worst coordinate.
    pub worst: Option<(usize, usize)>,
    pub coordinates_checked: usize,
    pub analytic_finite: bool,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.analytic_finite && self.max_rel_error <= self.tol
    }
}

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    pub step: f64,
    /// Denominator floor so that near-zero gradients are compared absolutely.
    pub floor: f64,
    /// Check at most this many evenly spaced coordinates per input.
    pub max_per_input: Option<usize>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions { step: 1e-6, floor: 1e-6, max_per_input: None }
    }
}

/// Relative error `|a - n| / max(|a|, |n|, floor)`.
pub fn rel_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

fn coords(n: usize, max: Option<usize>) -> Vec<usize> {
    match max {
        Some(m) if m < n => (0..m).map(|i| i * n / m + (n / m) / 2).collect(),
        _ => (0..n).collect(),
    }
}

/// Compares the reverse-mode gradient of the scalar function `f` at `inputs`
/// with central finite differences.
pub fn grad_check<F>(f: F, inputs: &[Tensor<f64>], tol: f64, opts: GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let eval = |xs: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|t| g.leaf(t.clone(), false)).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.value(out).data()[0])
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let out = f(&mut g, &vars)?;
    g.backward(out)?;
    let analytic: Vec<Tensor<f64>> = vars.iter().map(|&v| g.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(g.shape(v)))).collect();
    let analytic_finite = analytic.iter().all(Tensor::is_finite);

    let mut report = GradCheckReport { max_rel_error: 0.0, worst: None, coordinates_checked: 0, analytic_finite, tol };
    if !analytic_finite {
        report.max_rel_error = f64::INFINITY;
        return Ok(report);
    }
    let mut probe: Vec<Tensor<f64>> = inputs.to_vec();
    for (ii, input) in inputs.iter().enumerate() {
        for j in coords(input.numel(), opts.max_per_input) {
            let x0 = input.data()[j];
            probe[ii].data_mut()[j] = x0 + opts.step;
            let up = eval(&probe)?;
            probe[ii].data_mut()[j] = x0 - opts.step;
            let down = eval(&probe)?;
            probe[ii].data_mut()[j] = x0;
            let numeric = (up - down) / (2.0 * opts.step);
            let err = rel_error(analytic[ii].data()[j], numeric, opts.floor);
            report.coordinates_checked += 1;
            if !(err <= report.max_rel_error) {
                report.max_rel_error = err;
                report.worst = Some((ii, j));
            }
        }
    }
    Ok(report)
}
