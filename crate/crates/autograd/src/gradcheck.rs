//! Central finite-difference verification of reverse-mode gradients.
//!
//! Per coordinate the error is `|analytic - numeric| / max(|analytic|, |numeric|, 1e-3)`;
//! the floor keeps coordinates with vanishing gradients from reporting
//! huge relative errors out of pure rounding noise.

use crate::error::Result;
use crate::tensor::Tensor;

const DENOM_FLOOR: f64 = 1e-3;

/// Outcome of a gradient check.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// (tensor index, coordinate) of the worst coordinate
    pub worst: Option<(usize, usize)>,
    pub checked: usize,
    pub tolerance: f64,
    pub passed: bool,
    /// set when the function itself failed to evaluate
    pub failure: Option<String>,
}

impl GradCheckReport {
    fn failed(msg: String, tolerance: f64) -> Self {
        Self { max_rel_error: f64::INFINITY, worst: None, checked: 0, tolerance, passed: false, failure: Some(msg) }
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(DENOM_FLOOR)
}

/// Checks the gradient of the scalar function `f` at `x` on every coordinate.
///
/// `x` is copied into a fresh leaf, so the caller's tensor is never modified.
pub fn grad_check<F>(f: F, x: &Tensor<f64>, step: f64, tol: f64) -> GradCheckReport
where
    F: Fn(&Tensor<f64>) -> Result<Tensor<f64>>,
{
    let leaf = match Tensor::parameter(x.to_vec(), x.shape()) {
        Ok(t) => t,
        Err(e) => return GradCheckReport::failed(e.to_string(), tol),
    };
    let eval = || f(&leaf);
    check(eval, std::slice::from_ref(&leaf), None, step, tol)
}

/// Checks gradients of `f` with respect to `params`, which `f` must close over.
///
/// With `max_coords = Some(n)` only `n` evenly spaced coordinates of each
/// tensor are probed, which keeps checks on whole networks affordable.
/// Existing gradients on `params` are cleared.
pub fn grad_check_params<F>(
    f: F,
    params: &[Tensor<f64>],
    max_coords: Option<usize>,
    step: f64,
    tol: f64,
) -> GradCheckReport
where
    F: Fn() -> Result<Tensor<f64>>,
{
    check(f, params, max_coords, step, tol)
}

fn check<F>(f: F, params: &[Tensor<f64>], max_coords: Option<usize>, step: f64, tol: f64) -> GradCheckReport
where
    F: Fn() -> Result<Tensor<f64>>,
{
    params.iter().for_each(Tensor::zero_grad);
    let loss = match f() {
        Ok(l) => l,
        Err(e) => return GradCheckReport::failed(e.to_string(), tol),
    };
    if let Err(e) = loss.backward() {
        return GradCheckReport::failed(e.to_string(), tol);
    }
    drop(loss);

    let scalar = || -> Result<f64> { f()?.item() };
    let mut report =
        GradCheckReport { max_rel_error: 0.0, worst: None, checked: 0, tolerance: tol, passed: true, failure: None };
    for (pi, p) in params.iter().enumerate() {
        let analytic = p.grad().unwrap_or_else(|| vec![0.0; p.numel()]);
        let n = p.numel();
        let coords: Vec<usize> = match max_coords {
            Some(k) if k < n => (0..k).map(|i| i * n / k + (n / k) / 2).collect(),
            _ => (0..n).collect(),
        };
        for i in coords {
            let orig = p.data()[i];
            p.data_mut()[i] = orig + step;
            let plus = scalar();
            p.data_mut()[i] = orig - step;
            let minus = scalar();
            p.data_mut()[i] = orig;
            let (plus, minus) = match (plus, minus) {
                (Ok(a), Ok(b)) => (a, b),
                (Err(e), _) | (_, Err(e)) => return GradCheckReport::failed(e.to_string(), tol),
            };
            let numeric = (plus - minus) / (2.0 * step);
            let err = relative_error(analytic[i], numeric);
            report.checked += 1;
            if err > report.max_rel_error || err.is_nan() {
                report.max_rel_error = err;
                report.worst = Some((pi, i));
            }
        }
    }
    params.iter().for_each(Tensor::zero_grad);
    report.passed = report.max_rel_error <= tol;
    report
}
