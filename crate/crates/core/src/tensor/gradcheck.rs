//! Central-difference gradient checking in double precision.

use super::{backward, no_grad, Tensor, Var};
use crate::error::Result;

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    pub eps: f64,
    pub tol: f64,
    /// Denominator floor so near-zero gradients compare by absolute error.
    pub abs_floor: f64,
    /// Check at most this many evenly spaced coordinates per input.
    pub max_coords: Option<usize>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            tol: 1e-4,
            abs_floor: 1e-6,
            max_coords: None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(input, coordinate)` of the worst disagreement.
    pub worst: (usize, usize),
    pub checked: usize,
    pub passed: bool,
}

/// Coordinates to probe for a tensor of `n` entries.
pub fn sample_coords(n: usize, max: Option<usize>) -> Vec<usize> {
    match max {
        Some(m) if m < n && m > 0 => {
            if m == 1 {
                return vec![0];
            }
            let mut v: Vec<usize> = (0..m).map(|i| i * (n - 1) / (m - 1)).collect();
            v.dedup();
            v
        }
        _ => (0..n).collect(),
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Accumulates the comparison of analytic and numeric derivatives.
#[derive(Debug)]
pub struct GradComparison {
    opts: GradCheckOptions,
    report: GradCheckReport,
}

impl GradComparison {
    pub fn new(opts: GradCheckOptions) -> Self {
        Self {
            opts,
            report: GradCheckReport {
                max_rel_error: 0.0,
                worst: (0, 0),
                checked: 0,
                passed: true,
            },
        }
    }

    pub fn record(&mut self, input: usize, coord: usize, analytic: f64, numeric: f64) {
        let err = relative_error(analytic, numeric, self.opts.abs_floor);
        self.report.checked += 1;
        if err > self.report.max_rel_error || err.is_nan() {
            self.report.max_rel_error = if err.is_nan() { f64::INFINITY } else { err };
            self.report.worst = (input, coord);
        }
    }

    pub fn finish(mut self) -> GradCheckReport {
        self.report.passed = self.report.max_rel_error <= self.opts.tol;
        self.report
    }
}

/// Compares reverse-mode gradients of a scalar function with central
/// differences at `inputs`.
pub fn grad_check<F>(f: F, inputs: &[Tensor<f64>], opts: GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&[Var<f64>]) -> Result<Var<f64>>,
{
    let leaves: Vec<Var<f64>> = inputs.iter().cloned().map(Var::leaf).collect();
    let loss = f(&leaves)?;
    backward(&loss)?;
    let analytic: Vec<Tensor<f64>> = leaves
        .iter()
        .map(|l| l.grad().unwrap_or_else(|| Tensor::zeros(l.shape())))
        .collect();

    let _guard = no_grad();
    let eval = |which: usize, coord: usize, delta: f64| -> Result<f64> {
        let vars: Vec<Var<f64>> = inputs
            .iter()
            .enumerate()
            .map(|(i, t)| {
                let mut t = t.clone();
                if i == which {
                    t.data_mut()[coord] += delta;
                }
                Var::constant(t)
            })
            .collect();
        Ok(f(&vars)?.data()[0])
    };
    let mut cmp = GradComparison::new(opts);
    for (i, t) in inputs.iter().enumerate() {
        for c in sample_coords(t.len(), opts.max_coords) {
            let numeric = (eval(i, c, opts.eps)? - eval(i, c, -opts.eps)?) / (2.0 * opts.eps);
            cmp.record(i, c, analytic[i].data()[c], numeric);
        }
    }
    Ok(cmp.finish())
}
