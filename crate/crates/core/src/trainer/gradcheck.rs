//! Whole-model gradient check in 64-bit mode.

use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::gradcheck::{check_ste_closed_form, finite_diff_check, GradcheckOptions, GradcheckReport};
use crate::autograd::{ParamClass, SteKind};
use crate::error::Result;
use crate::models::{Model, ModelSpec};
use crate::tensor::{BnMode, Tensor};

pub const DEFAULT_TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug)]
pub struct ModelGradcheck {
    pub report: GradcheckReport,
    /// Largest deviation of each estimator's backward from its closed form.
    pub ste: Vec<(SteKind, f64)>,
    pub tol: f64,
}

impl ModelGradcheck {
    pub fn passes(&self) -> bool {
        self.report.passes(self.tol) && self.ste.iter().all(|(_, e)| *e == 0.0)
    }

    /// Worst relative error of one parameter class, if the model has it.
    pub fn class_error(&self, class: ParamClass) -> Option<f64> {
        self.report.by_class().into_iter().find(|(c, _)| *c == class).map(|(_, e)| e)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (kind, err) in &self.ste {
            let verdict = if *err == 0.0 { "pass" } else { "fail" };
            let _ = writeln!(s, "ste={} closed_form_max_error={err:.3e} result={verdict}", kind.as_str());
        }
        s.push_str(&self.report.to_text(self.tol));
        let _ = writeln!(s, "overall={}", if self.passes() { "pass" } else { "fail" });
        s
    }
}

/// Checks every parameter gradient of `spec` against central differences on
/// a random batch. Raw self-distribution factors start from random values so
/// their constraint functions are not all probed at zero.
pub fn gradcheck_model(
    spec: &ModelSpec,
    seed: u64,
    batch: usize,
    opts: &GradcheckOptions,
    tol: f64,
) -> Result<ModelGradcheck> {
    let mut model = Model::<f64>::build(spec, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6772_6164);
    for p in model.params.iter_mut() {
        if matches!(p.class, ParamClass::AsdRaw | ParamClass::WsdRaw) {
            p.value = Tensor::randn(p.value.shape().to_vec(), 0.5, &mut rng);
        }
    }
    let [c, h, w] = spec.input;
    let x = Tensor::<f64>::randn([batch, c, h, w], 1.0, &mut rng);
    let labels: Vec<usize> = (0..batch).map(|i| i % spec.classes).collect();
    let mut store = model.params.clone();
    let subset: Vec<_> = store.ids().collect();
    let report = finite_diff_check(&mut store, &subset, opts, |g, s| {
        let out = model.forward_graph_with(s, g, x.clone(), BnMode::Train)?;
        g.softmax_cross_entropy(out, &labels)
    })?;
    let mut ste = Vec::new();
    let mut kinds: Vec<SteKind> = spec.binary_layers().map(|(_, _, p)| p.ste).collect();
    kinds.dedup();
    for kind in kinds {
        ste.push((kind, check_ste_closed_form(kind, opts.ste_backward_override)?));
    }
    Ok(ModelGradcheck { report, ste, tol })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::PresetOptions;

    #[test]
    fn two_block_model_passes_for_every_class() {
        let spec = ModelSpec::preset("twoblock", &PresetOptions::default()).unwrap();
        let r = gradcheck_model(&spec, 0, 4, &GradcheckOptions::default(), DEFAULT_TOLERANCE).unwrap();
        assert!(r.passes(), "{}", r.to_text());
        for class in [ParamClass::LatentWeight, ParamClass::AsdRaw, ParamClass::WsdRaw, ParamClass::DasdHead] {
            assert!(r.class_error(class).is_some(), "{class} missing");
        }
    }

    #[test]
    fn wrong_estimator_fails() {
        let spec = ModelSpec::preset("twoblock", &PresetOptions::default()).unwrap();
        let opts = GradcheckOptions { ste_backward_override: Some(SteKind::ApproxSign), ..Default::default() };
        let r = gradcheck_model(&spec, 0, 4, &opts, DEFAULT_TOLERANCE).unwrap();
        assert!(!r.passes());
        assert!(r.to_text().contains("result=fail"));
    }
}
