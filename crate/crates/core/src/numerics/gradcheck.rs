//! Central finite-difference gradient oracle.
//!
//! The objective is rebuilt from scratch for every perturbed evaluation, so the
//! estimate shares nothing with the reverse sweep except the forward ops.

use serde::Serialize;

use super::graph::{Graph, Var};
use super::params::ParamSet;
use crate::error::{Error, Result};

/// Below this magnitude entries are compared by absolute error.
pub const ABS_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, Serialize)]
pub struct ParamGradCheck {
    pub name: String,
    pub compared: usize,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradReport {
    pub label: String,
    pub eps: f64,
    pub tolerance: f64,
    pub params: Vec<ParamGradCheck>,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub pass: bool,
}

impl GradReport {
    pub fn with_label(mut self, label: impl Into<String>) -> Self {
        self.label = label.into();
        self
    }
}

/// Relative error with absolute fallback when both magnitudes are tiny.
/// Returns `(relative_or_absolute, absolute)`.
pub fn entry_error(analytic: f64, numeric: f64) -> (f64, f64) {
    let abs = (analytic - numeric).abs();
    let scale = analytic.abs().max(numeric.abs());
    if scale < ABS_FLOOR {
        (abs, abs)
    } else {
        (abs / scale, abs)
    }
}

/// Central differences `(f(θ+ε) − f(θ−ε)) / 2ε` for every coordinate of
/// `name`. `objective` must be deterministic.
pub fn numeric_gradient(
    objective: &dyn Fn(&ParamSet) -> Result<f64>,
    params: &ParamSet,
    name: &str,
    eps: f64,
) -> Result<Vec<f64>> {
    let len = params
        .get(name)
        .ok_or_else(|| Error::InvalidConfig(format!("missing parameter `{name}`")))?
        .numel();
    let mut probe = params.clone();
    let mut out = Vec::with_capacity(len);
    for i in 0..len {
        let original = probe.get(name).unwrap().data()[i];
        probe.get_mut(name).unwrap().data_mut()[i] = original + eps;
        let plus = objective(&probe)?;
        probe.get_mut(name).unwrap().data_mut()[i] = original - eps;
        let minus = objective(&probe)?;
        probe.get_mut(name).unwrap().data_mut()[i] = original;
        out.push((plus - minus) / (2.0 * eps));
    }
    Ok(out)
}

/// Compares reverse-mode gradients of the scalar built by `build` against
/// central finite differences for every trainable entry of `params`.
pub fn finite_difference_gradient<F>(build: F, params: &ParamSet, eps: f64, tolerance: f64) -> Result<GradReport>
where
    F: Fn(&mut Graph, &ParamSet) -> Result<Var>,
{
    if eps <= 0.0 {
        return Err(Error::InvalidConfig(format!("finite-difference step must be positive, got {eps}")));
    }
    let objective = |p: &ParamSet| -> Result<f64> {
        let mut g = Graph::new();
        let root = build(&mut g, p)?;
        g.value(root).item()
    };
    let first = objective(params)?;
    let second = objective(params)?;
    if first.to_bits() != second.to_bits() {
        return Err(Error::NonDeterministic { first, second });
    }

    let mut graph = Graph::new();
    let root = build(&mut graph, params)?;
    let grads = graph.backward(root)?;

    let mut report = GradReport {
        label: String::new(),
        eps,
        tolerance,
        params: Vec::new(),
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        pass: true,
    };
    for (name, tensor) in params.trainable() {
        // Unbound parameters have an all-zero analytic gradient.
        let analytic: Vec<f64> = graph
            .bindings()
            .iter()
            .filter(|(n, _)| n == name)
            .filter_map(|(_, v)| grads.get(*v))
            .fold(vec![0.0; tensor.numel()], |mut acc, g| {
                acc.iter_mut().zip(g).for_each(|(a, b)| *a += b);
                acc
            });
        let numeric = numeric_gradient(&objective, params, name, eps)?;
        let mut check = ParamGradCheck {
            name: name.to_string(),
            compared: analytic.len(),
            max_rel_error: 0.0,
            max_abs_error: 0.0,
            pass: true,
        };
        for (a, n) in analytic.iter().zip(&numeric) {
            let (rel, abs) = entry_error(*a, *n);
            check.max_rel_error = check.max_rel_error.max(rel);
            check.max_abs_error = check.max_abs_error.max(abs);
            if rel > tolerance {
                check.pass = false;
            }
        }
        report.max_rel_error = report.max_rel_error.max(check.max_rel_error);
        report.max_abs_error = report.max_abs_error.max(check.max_abs_error);
        report.pass &= check.pass;
        report.params.push(check);
    }
    Ok(report)
}
