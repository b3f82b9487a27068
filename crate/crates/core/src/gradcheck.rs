//! Central finite-difference checks for graph-built scalar functions.
//!
//! The checker only evaluates the forward pass; it never touches
//! [`Graph::backward`](crate::autodiff::Graph::backward), so it can stand as
//! an independent oracle for the analytic gradients.

use alloc::vec::Vec;

use crate::autodiff::{Graph, Var};
use crate::nn::{Bound, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub checked: usize,
}

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    let denom = libm::fabs(analytic).max(libm::fabs(numeric)).max(floor);
    libm::fabs(analytic - numeric) / denom
}

/// Compares analytic gradients of `f` with respect to each input tensor to
/// central differences with step `h`. `f` builds a scalar on the graph from
/// trainable leaves holding the inputs.
pub fn check_inputs(
    inputs: &[Tensor],
    h: f64,
    floor: f64,
    f: impl Fn(&mut Graph, &[Var]) -> Var,
) -> GradCheckReport {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars);
    let grads = g.backward(out);
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();

    let eval = |perturbed: &[Tensor]| {
        let mut g = Graph::new();
        let vars: Vec<Var> = perturbed.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars);
        g.value(out).item()
    };

    let mut report = GradCheckReport { max_rel_error: 0.0, max_abs_error: 0.0, checked: 0 };
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (k, t) in inputs.iter().enumerate() {
        for i in 0..t.len() {
            let orig = t.data()[i];
            work[k].data_mut()[i] = orig + h;
            let plus = eval(&work);
            work[k].data_mut()[i] = orig - h;
            let minus = eval(&work);
            work[k].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic[k].data()[i];
            report.max_rel_error = report.max_rel_error.max(relative_error(a, numeric, floor));
            report.max_abs_error = report.max_abs_error.max(libm::fabs(a - numeric));
            report.checked += 1;
        }
    }
    report
}

/// Same as [`check_inputs`] but perturbs every scalar of a [`ParamStore`].
/// `f` receives the store already bound to the graph.
pub fn check_params(
    store: &ParamStore,
    h: f64,
    floor: f64,
    f: impl Fn(&mut Graph, &Bound) -> Var,
) -> GradCheckReport {
    let mut g = Graph::new();
    let bound = store.bind(&mut g, true);
    let out = f(&mut g, &bound);
    let mut grads = g.backward(out);
    let analytic = bound.collect_grads(store, &mut grads);

    let eval = |s: &ParamStore| {
        let mut g = Graph::new();
        let bound = s.bind(&mut g, false);
        let out = f(&mut g, &bound);
        g.value(out).item()
    };

    let mut report = GradCheckReport { max_rel_error: 0.0, max_abs_error: 0.0, checked: 0 };
    let mut work = store.clone();
    let names: Vec<alloc::string::String> = store.iter().map(|(n, _)| n.into()).collect();
    for (k, name) in names.iter().enumerate() {
        let n = store.by_name(name).map(Tensor::len).unwrap_or(0);
        for i in 0..n {
            let orig = store.by_name(name).unwrap().data()[i];
            work.by_name_mut(name).unwrap().data_mut()[i] = orig + h;
            let plus = eval(&work);
            work.by_name_mut(name).unwrap().data_mut()[i] = orig - h;
            let minus = eval(&work);
            work.by_name_mut(name).unwrap().data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic[k].data()[i];
            report.max_rel_error = report.max_rel_error.max(relative_error(a, numeric, floor));
            report.max_abs_error = report.max_abs_error.max(libm::fabs(a - numeric));
            report.checked += 1;
        }
    }
    report
}
