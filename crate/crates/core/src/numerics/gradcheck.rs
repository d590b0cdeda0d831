//! Finite-difference verification of reverse-mode gradients.
//!
//! The analytic gradient is the production `f32` reverse sweep. The
//! reference is a central difference of the same objective replayed in
//! `f64`, which keeps rounding noise far below the tolerance.

use super::graph::{Graph, Var};
use super::params::{grad, Bindings, ParamStore};
use super::tensor::Real;
use crate::error::{Error, Result};

/// A scalar objective that can be evaluated at any precision.
pub trait Objective {
    fn loss<R: Real>(&self, g: &Graph<R>, params: &Bindings) -> Result<Var>;
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mismatch {
    pub path: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub error: f64,
}

#[derive(Clone, Debug)]
pub struct GradcheckReport {
    pub passed: bool,
    pub checked: usize,
    /// Largest relative error seen, with its location.
    pub worst: Option<Mismatch>,
    pub failures: Vec<Mismatch>,
}

/// Relative error with a floor on the denominator so that entries whose
/// true gradient is zero are compared absolutely.
fn relative_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-2)
}

fn eval_perturbed<O: Objective>(
    obj: &O,
    params: &ParamStore,
    path: &str,
    index: usize,
    delta: f64,
) -> Result<f64> {
    let g = Graph::<f64>::new();
    let b = Bindings::bind_perturbed(&g, params, path, index, delta);
    let loss = obj.loss(&g, &b)?;
    g.value(loss).item()
}

pub fn gradcheck<O: Objective>(
    obj: &O,
    params: &ParamStore,
    eps: f64,
    tol: f64,
) -> Result<GradcheckReport> {
    let (_, analytic) = grad(params, |g, b| obj.loss(g, b))?;
    compare_gradients(obj, params, &analytic, eps, tol)
}

/// Checks a supplied gradient against central differences of `obj`.
pub fn compare_gradients<O: Objective>(
    obj: &O,
    params: &ParamStore,
    analytic: &ParamStore,
    eps: f64,
    tol: f64,
) -> Result<GradcheckReport> {
    if !(eps > 0.0 && eps <= 1e-2) {
        return Err(Error::Contract(format!(
            "gradcheck step {eps} outside (0, 1e-2]"
        )));
    }
    let mut report = GradcheckReport {
        passed: true,
        checked: 0,
        worst: None,
        failures: Vec::new(),
    };
    for (path, p) in params.trainable() {
        let ga = analytic.get(path)?;
        if ga.shape() != p.shape() {
            return Err(Error::shape(
                format!("gradient of {path}"),
                p.shape(),
                ga.shape(),
            ));
        }
        for index in 0..p.len() {
            let plus = eval_perturbed(obj, params, path, index, eps)?;
            let minus = eval_perturbed(obj, params, path, index, -eps)?;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = ga.data()[index] as f64;
            let error = relative_error(a, numeric);
            let m = Mismatch {
                path: path.to_string(),
                index,
                analytic: a,
                numeric,
                error,
            };
            report.checked += 1;
            if report.worst.as_ref().is_none_or(|w| error > w.error) {
                report.worst = Some(m.clone());
            }
            if !(error <= tol) {
                report.passed = false;
                report.failures.push(m);
            }
        }
    }
    Ok(report)
}
