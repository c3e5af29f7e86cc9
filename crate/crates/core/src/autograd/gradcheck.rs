//! Central-difference verification of analytic gradients.
//!
//! A loss with `sign` in it is piecewise constant, so its finite differences
//! carry no information about the straight-through chain. The check therefore
//! splits in two:
//!
//! * every `sign` node is replaced, for the perturbed evaluations only, by its
//!   linearization `sign(a) + ste'(a) (x - a)` around the pre-activation `a`
//!   recorded in the unperturbed pass. At the base point its value equals the
//!   exact forward and its slope equals the estimator, so the finite
//!   differences exercise every other factor of the chain rule;
//! * the estimator itself is checked against its closed form by
//!   [`check_ste_closed_form`].

use std::fmt::Write as _;

use super::{Graph, NodeId, ParamClass, ParamId, ParamStore, SignMode, SteKind};
use crate::error::Result;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GradcheckOptions {
    pub eps: f64,
    /// Elements checked per parameter; larger tensors are sampled evenly.
    pub max_elements: usize,
    /// Negative control: backward uses this estimator instead of the one the
    /// forward pass (and therefore the finite differences) used.
    pub ste_backward_override: Option<SteKind>,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        GradcheckOptions { eps: 1e-6, max_elements: 48, ste_backward_override: None }
    }
}

#[derive(Clone, Debug)]
pub struct ParamReport {
    pub id: ParamId,
    pub name: String,
    pub class: ParamClass,
    pub checked: usize,
    /// `max |analytic - numeric| / max(max |numeric|, 1e-8)` over the
    /// checked elements.
    pub max_rel_error: f64,
    pub max_abs_error: f64,
}

#[derive(Clone, Debug, Default)]
pub struct GradcheckReport {
    pub params: Vec<ParamReport>,
}

impl GradcheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.params.iter().all(|p| p.max_rel_error <= tol)
    }

    pub fn flagged(&self, tol: f64) -> Vec<&ParamReport> {
        self.params.iter().filter(|p| p.max_rel_error > tol).collect()
    }

    /// Worst error per parameter class, in first-seen order.
    pub fn by_class(&self) -> Vec<(ParamClass, f64)> {
        let mut out: Vec<(ParamClass, f64)> = Vec::new();
        for p in &self.params {
            match out.iter_mut().find(|(c, _)| *c == p.class) {
                Some((_, e)) => *e = e.max(p.max_rel_error),
                None => out.push((p.class, p.max_rel_error)),
            }
        }
        out
    }

    pub fn to_text(&self, tol: f64) -> String {
        let mut s = String::new();
        for (class, err) in self.by_class() {
            let verdict = if err <= tol { "pass" } else { "fail" };
            let _ = writeln!(s, "class={class} max_rel_error={err:.3e} tol={tol:.0e} result={verdict}");
        }
        for p in &self.params {
            let _ = writeln!(
                s,
                "param={} class={} checked={} max_rel_error={:.3e} max_abs_error={:.3e}",
                p.name, p.class, p.checked, p.max_rel_error, p.max_abs_error
            );
        }
        s
    }
}

/// Relative error of an analytic gradient against a numeric one.
pub fn compare(analytic: &[f64], numeric: &[f64]) -> (f64, f64) {
    let scale = numeric.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-8);
    let abs = analytic.iter().zip(numeric).fold(0.0f64, |m, (a, n)| m.max((a - n).abs()));
    (abs / scale, abs)
}

fn sample_indices(len: usize, max: usize) -> Vec<usize> {
    if len <= max {
        return (0..len).collect();
    }
    (0..max).map(|i| i * len / max).collect()
}

/// Checks `∂loss/∂p` for every `p` in `subset`.
///
/// `loss` builds the forward pass on the given graph from the given store and
/// returns the scalar loss node. It is called once for the analytic pass and
/// twice per checked element.
pub fn finite_diff_check<F>(
    store: &mut ParamStore<f64>,
    subset: &[ParamId],
    opts: &GradcheckOptions,
    mut loss: F,
) -> Result<GradcheckReport>
where
    F: FnMut(&mut Graph<f64>, &ParamStore<f64>) -> Result<NodeId>,
{
    let mut g = Graph::with_sign_mode(SignMode::Record);
    if let Some(kind) = opts.ste_backward_override {
        g.override_ste_backward(kind);
    }
    let l = loss(&mut g, store)?;
    store.zero_grad();
    g.backward(l, store)?;
    let anchors = g.take_recorded();
    drop(g);

    let mut eval = |store: &ParamStore<f64>| -> Result<f64> {
        let mut g = Graph::with_sign_mode(SignMode::Linearized(anchors.clone()));
        let l = loss(&mut g, store)?;
        Ok(g.value(l).data()[0])
    };

    let mut report = GradcheckReport::default();
    for &id in subset {
        let len = store.get(id).value.len();
        let idx = sample_indices(len, opts.max_elements);
        let mut analytic = Vec::with_capacity(idx.len());
        let mut numeric = Vec::with_capacity(idx.len());
        for &i in &idx {
            let orig = store.get(id).value.data()[i];
            store.get_mut(id).value.data_mut()[i] = orig + opts.eps;
            let plus = eval(store)?;
            store.get_mut(id).value.data_mut()[i] = orig - opts.eps;
            let minus = eval(store)?;
            store.get_mut(id).value.data_mut()[i] = orig;
            numeric.push((plus - minus) / (2.0 * opts.eps));
            analytic.push(store.get(id).grad.data()[i]);
        }
        let (rel, abs) = compare(&analytic, &numeric);
        let p = store.get(id);
        report.params.push(ParamReport {
            id,
            name: p.name.clone(),
            class: p.class,
            checked: idx.len(),
            max_rel_error: rel,
            max_abs_error: abs,
        });
    }
    Ok(report)
}

/// Compares the graph's `sign` backward with the closed-form estimator
/// derivative on a grid spanning both dead zones. Returns the largest
/// absolute difference (zero when the implementation is exact).
pub fn check_ste_closed_form(kind: SteKind, backward_kind: Option<SteKind>) -> Result<f64> {
    let xs: Vec<f64> = (-300..=300).map(|i| i as f64 / 100.0).collect();
    let n = xs.len();
    let x = Tensor::new([n], xs.clone())?;
    let mut g = Graph::new();
    if let Some(k) = backward_kind {
        g.override_ste_backward(k);
    }
    let xi = g.input(x);
    let s = g.sign(xi, kind)?;
    let l = g.sum(s);
    let grads = g.gradients(l)?;
    let got = grads.get(xi).expect("input feeds the loss");
    Ok(xs.iter().zip(got.data()).fold(0.0f64, |m, (&x, &g)| m.max((g - kind.derivative(x)).abs())))
}
