//! Networks built from a [`ModelSpec`]: parameters, the trainable surrogate
//! forward pass and the bit-packed inference network.

mod packed;
mod spec;

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use packed::{PackedLayer, PackedNet, PackedShift};
pub use spec::{
    Activation, AsdPolicy, BinaryPolicy, LayerKind, LayerSpec, ModelSpec, PresetOptions, SampleShape, PRESETS,
};

use crate::autograd::{Graph, NodeId, ParamClass, ParamId, ParamStore};
use crate::binarize::{dasd_hidden, graph as sd, SignStats};
use crate::error::{Error, Result};
use crate::tensor::{BnMode, BnState, Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ForwardPath {
    /// Float `±1` tensors through the autograd graph.
    Surrogate,
    /// Bit-packed XNOR/popcount convolutions; inference only.
    Packed,
}

impl std::str::FromStr for ForwardPath {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "surrogate" => Ok(ForwardPath::Surrogate),
            "packed" => Ok(ForwardPath::Packed),
            other => Err(Error::Config(format!("unknown path {other:?} (surrogate|packed)"))),
        }
    }
}

/// Parameters owned by one layer.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum LayerParams {
    None,
    Conv { weight: ParamId, bias: Option<ParamId> },
    BConv { weight: ParamId, asd: Option<ParamId>, dasd: Option<[ParamId; 4]>, wsd: Option<ParamId> },
    Bn { gamma: ParamId, beta: ParamId, state: usize },
    Linear { weight: ParamId, bias: Option<ParamId> },
}

/// Sign statistics of the tensors a binary layer binarizes.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerStats {
    pub layer: String,
    /// `activation` (after the shift) or `weight` (after WSD).
    pub tensor: &'static str,
    pub stats: SignStats,
}

impl LayerStats {
    pub fn to_line(&self) -> String {
        format!("layer={} tensor={} {}", self.layer, self.tensor, self.stats.to_kv())
    }
}

#[derive(Clone, Debug)]
pub struct Model<T: Real = f32> {
    spec: ModelSpec,
    pub params: ParamStore<T>,
    pub bn_states: Vec<BnState<T>>,
    layer_params: Vec<LayerParams>,
}

fn kaiming_uniform<T: Real>(shape: Vec<usize>, fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor<T> {
    let bound = (6.0 / fan_in as f64).sqrt();
    Tensor::rand_uniform(shape, -bound, bound, rng)
}

impl<T: Real> Model<T> {
    /// Deterministic initialization: Kaiming-uniform weights, zero biases,
    /// unit BN scales, zero self-distribution raws.
    pub fn build(spec: &ModelSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let mut bn_states = Vec::new();
        let mut layer_params = Vec::with_capacity(spec.layers.len());
        for l in &spec.layers {
            let n = &l.name;
            let lp = match &l.kind {
                LayerKind::Conv(g) => {
                    let weight = params.add(
                        format!("{n}.weight"),
                        ParamClass::Weight,
                        kaiming_uniform(g.weight_shape().to_vec(), g.fan_in(), &mut rng),
                    );
                    let bias = g
                        .has_bias
                        .then(|| params.add(format!("{n}.bias"), ParamClass::Bias, Tensor::zeros([g.out_channels])));
                    LayerParams::Conv { weight, bias }
                }
                LayerKind::BConv(g, p) => {
                    let weight = params.add(
                        format!("{n}.weight"),
                        ParamClass::LatentWeight,
                        kaiming_uniform(g.weight_shape().to_vec(), g.fan_in(), &mut rng),
                    );
                    let c = g.in_channels;
                    let (asd, dasd) = match p.asd {
                        AsdPolicy::Off => (None, None),
                        AsdPolicy::Static(_) => {
                            (Some(params.add(format!("{n}.asd_beta"), ParamClass::AsdRaw, Tensor::zeros([c]))), None)
                        }
                        AsdPolicy::Dynamic { re } => {
                            let h = dasd_hidden(c, re);
                            let b1 = 1.0 / (c as f64).sqrt();
                            let b2 = 1.0 / (h as f64).sqrt();
                            let mut add = |suffix: &str, v: Tensor<T>| {
                                params.add(format!("{n}.dasd.{suffix}"), ParamClass::DasdHead, v)
                            };
                            let w1 = add("w1", Tensor::rand_uniform([h, c], -b1, b1, &mut rng));
                            let bb1 = add("b1", Tensor::zeros([h]));
                            let w2 = add("w2", Tensor::rand_uniform([c, h], -b2, b2, &mut rng));
                            let bb2 = add("b2", Tensor::zeros([c]));
                            (None, Some([w1, bb1, w2, bb2]))
                        }
                    };
                    let wsd = p
                        .wsd
                        .then(|| params.add(format!("{n}.wsd_alpha"), ParamClass::WsdRaw, Tensor::zeros([g.out_channels])));
                    LayerParams::BConv { weight, asd, dasd, wsd }
                }
                LayerKind::Bn { channels } => {
                    let gamma = params.add(format!("{n}.gamma"), ParamClass::BnGamma, Tensor::ones([*channels]));
                    let beta = params.add(format!("{n}.beta"), ParamClass::BnBeta, Tensor::zeros([*channels]));
                    bn_states.push(BnState::new(*channels));
                    LayerParams::Bn { gamma, beta, state: bn_states.len() - 1 }
                }
                LayerKind::Linear { in_features, out_features, bias } => {
                    let weight = params.add(
                        format!("{n}.weight"),
                        ParamClass::Weight,
                        kaiming_uniform(vec![*out_features, *in_features], *in_features, &mut rng),
                    );
                    let bias = bias.then(|| params.add(format!("{n}.bias"), ParamClass::Bias, Tensor::zeros([*out_features])));
                    LayerParams::Linear { weight, bias }
                }
                _ => LayerParams::None,
            };
            layer_params.push(lp);
        }
        Ok(Model { spec: spec.clone(), params, bn_states, layer_params })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn layer_params(&self) -> &[LayerParams] {
        &self.layer_params
    }

    /// Same network in another precision.
    pub fn cast<U: Real>(&self) -> Model<U> {
        Model {
            spec: self.spec.clone(),
            params: self.params.cast(),
            bn_states: self
                .bn_states
                .iter()
                .map(|s| BnState {
                    running_mean: s.running_mean.iter().map(|v| U::from_f64(v.as_f64())).collect(),
                    running_var: s.running_var.iter().map(|v| U::from_f64(v.as_f64())).collect(),
                    momentum: U::from_f64(s.momentum.as_f64()),
                    eps: U::from_f64(s.eps.as_f64()),
                })
                .collect(),
            layer_params: self.layer_params.clone(),
        }
    }

    /// Builds the surrogate forward pass on `g` from the model's parameters.
    pub fn forward_graph(&mut self, g: &mut Graph<T>, x: Tensor<T>, mode: BnMode) -> Result<NodeId> {
        forward_graph_impl(&self.spec, &self.layer_params, &self.params, &mut self.bn_states, g, x, mode, None)
    }

    /// Like [`Model::forward_graph`] but reading parameters from `store`,
    /// which must have the model's layout (a perturbed copy, for instance).
    pub fn forward_graph_with(
        &mut self,
        store: &ParamStore<T>,
        g: &mut Graph<T>,
        x: Tensor<T>,
        mode: BnMode,
    ) -> Result<NodeId> {
        if store.len() != self.params.len() {
            return Err(Error::shape("parameter store does not match the model"));
        }
        forward_graph_impl(&self.spec, &self.layer_params, store, &mut self.bn_states, g, x, mode, None)
    }

    /// Sign statistics of every binary layer's activation and weight operands.
    pub fn sign_stats(&mut self, x: Tensor<T>, mode: BnMode) -> Result<Vec<LayerStats>> {
        self.sign_stats_with(x, mode, &[])
    }

    /// Like [`Model::sign_stats`], with a constant added to the shifted
    /// activations of the named binary layers. The constant bypasses the
    /// factor constraints, which makes it a direct way to force a layer
    /// into degeneration.
    pub fn sign_stats_with(&mut self, x: Tensor<T>, mode: BnMode, inject: &[(String, f64)]) -> Result<Vec<LayerStats>> {
        for (name, _) in inject {
            if !self.spec.binary_layers().any(|(n, _, _)| n == name) {
                return Err(Error::Config(format!("{name:?} is not a binary layer of {}", self.spec.name)));
            }
        }
        let mut probe = Probe { stats: Vec::new(), inject };
        let mut g = Graph::new();
        forward_graph_impl(
            &self.spec,
            &self.layer_params,
            &self.params,
            &mut self.bn_states,
            &mut g,
            x,
            mode,
            Some(&mut probe),
        )?;
        Ok(probe.stats)
    }
}

struct Probe<'a> {
    stats: Vec<LayerStats>,
    inject: &'a [(String, f64)],
}

impl Model<f32> {
    /// Logits for a batch `[N, C, H, W]`.
    pub fn forward(&mut self, x: Tensor<f32>, mode: BnMode, path: ForwardPath) -> Result<Tensor<f32>> {
        match path {
            ForwardPath::Surrogate => {
                let mut g = Graph::new();
                let out = self.forward_graph(&mut g, x, mode)?;
                Ok(g.value(out).clone())
            }
            ForwardPath::Packed => {
                if mode == BnMode::Train {
                    return Err(Error::Unsupported("the packed path is inference only; use eval mode".into()));
                }
                PackedNet::from_model(self)?.forward(&x)
            }
        }
    }
}

fn check_input<T: Real>(spec: &ModelSpec, x: &Tensor<T>) -> Result<()> {
    let [_, c, h, w] = x.dims4()?;
    if [c, h, w] != spec.input {
        return Err(Error::shape(format!("model {} expects [N, {:?}], got {:?}", spec.name, spec.input, x.shape())));
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn forward_graph_impl<T: Real>(
    spec: &ModelSpec,
    layer_params: &[LayerParams],
    store: &ParamStore<T>,
    bn_states: &mut [BnState<T>],
    g: &mut Graph<T>,
    x: Tensor<T>,
    mode: BnMode,
    mut probe: Option<&mut Probe<'_>>,
) -> Result<NodeId> {
    check_input(spec, &x)?;
    let mut cur = g.input(x);
    let mut saved: HashMap<&str, NodeId> = HashMap::new();
    for (l, lp) in spec.layers.iter().zip(layer_params) {
        cur = match (&l.kind, lp) {
            (LayerKind::Conv(geom), LayerParams::Conv { weight, bias }) => {
                let w = g.param(store, *weight);
                let b = bias.map(|b| g.param(store, b));
                g.conv2d(cur, w, b, *geom, T::zero())?
            }
            (LayerKind::BConv(geom, policy), LayerParams::BConv { weight, asd, dasd, wsd }) => {
                let shifted = match (policy.asd, asd, dasd) {
                    (AsdPolicy::Static(form), Some(raw), _) => {
                        let r = g.param(store, *raw);
                        sd::asd_shift(g, cur, r, form)?
                    }
                    (AsdPolicy::Dynamic { .. }, _, Some(head)) => {
                        let h = head.map(|p| g.param(store, p));
                        sd::dasd_shift(g, cur, h)?
                    }
                    _ => cur,
                };
                let shifted = match probe.as_deref().and_then(|p| p.inject.iter().find(|(n, _)| *n == l.name)) {
                    Some(&(_, v)) => {
                        let shape = g.value(shifted).shape().to_vec();
                        let k = g.input(Tensor::full(shape, T::from_f64(v)));
                        g.add(shifted, k)?
                    }
                    None => shifted,
                };
                let w = g.param(store, *weight);
                let w_shifted = match wsd {
                    Some(raw) => {
                        let r = g.param(store, *raw);
                        sd::wsd_shift(g, w, r)?
                    }
                    None => w,
                };
                if let Some(p) = probe.as_deref_mut() {
                    p.stats.push(LayerStats {
                        layer: l.name.clone(),
                        tensor: "activation",
                        stats: SignStats::compute(g.value(shifted), true)?,
                    });
                    p.stats.push(LayerStats {
                        layer: l.name.clone(),
                        tensor: "weight",
                        stats: SignStats::compute(g.value(w_shifted), false)?,
                    });
                }
                let a_b = g.sign(shifted, policy.ste)?;
                let w_b = g.sign(w_shifted, policy.ste)?;
                let z = g.conv2d(a_b, w_b, None, *geom, T::one())?;
                if policy.scale {
                    sd::analytic_scaling(g, z, w, cur)?
                } else {
                    z
                }
            }
            (LayerKind::Bn { .. }, LayerParams::Bn { gamma, beta, state }) => {
                let ga = g.param(store, *gamma);
                let be = g.param(store, *beta);
                g.batchnorm(cur, ga, be, &mut bn_states[*state], mode)?
            }
            (LayerKind::Act(a), _) => match a {
                Activation::Relu => g.relu(cur),
                Activation::Hardtanh => g.hardtanh(cur),
                Activation::Sigmoid => g.sigmoid(cur),
                Activation::Tanh => g.tanh(cur),
            },
            (LayerKind::MaxPool { kernel, stride }, _) => g.maxpool(cur, *kernel, *stride)?,
            (LayerKind::Gap, _) => g.global_avg_pool(cur)?,
            (LayerKind::Flatten, _) => {
                let n = g.value(cur).shape()[0];
                let f = g.value(cur).len() / n.max(1);
                g.reshape(cur, [n, f])?
            }
            (LayerKind::Linear { .. }, LayerParams::Linear { weight, bias }) => {
                let w = g.param(store, *weight);
                let b = bias.map(|b| g.param(store, b));
                g.linear(cur, w, b)?
            }
            (LayerKind::Save, _) => {
                saved.insert(l.name.as_str(), cur);
                cur
            }
            (LayerKind::Add { from, stride, out_channels }, _) => {
                let src = *saved
                    .get(from.as_str())
                    .ok_or_else(|| Error::Spec(format!("shortcut source {from:?} was never saved")))?;
                let c = g.value(src).shape()[1];
                let src = if *stride != 1 || *out_channels != c { g.downsample(src, *stride, *out_channels)? } else { src };
                g.add(cur, src)?
            }
            (kind, lp) => return Err(Error::State(format!("layer {} ({kind:?}) has parameters {lp:?}", l.name))),
        };
    }
    Ok(cur)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::SteKind;
    use crate::binarize::AsdForm;

    fn opts(asd: AsdPolicy, wsd: bool, scale: bool) -> PresetOptions {
        PresetOptions { policy: BinaryPolicy { asd, wsd, scale, ste: SteKind::ClipSte }, ..Default::default() }
    }

    #[test]
    fn output_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for (name, input) in [("lenet", [1, 28, 28]), ("resnet20", [3, 32, 32]), ("vgg_small_lite", [3, 32, 32])] {
            let spec = ModelSpec::preset(name, &PresetOptions::default()).unwrap();
            let mut m = Model::<f32>::build(&spec, 0).unwrap();
            let x = Tensor::randn([2, input[0], input[1], input[2]], 1.0, &mut rng);
            let y = m.forward(x, BnMode::Train, ForwardPath::Surrogate).unwrap();
            assert_eq!(y.shape(), &[2, 10], "{name}");
        }
    }

    #[test]
    fn same_seed_same_parameters() {
        let spec = ModelSpec::preset("resnet20", &opts(AsdPolicy::Dynamic { re: 16 }, true, false)).unwrap();
        let a = Model::<f32>::build(&spec, 7).unwrap();
        let b = Model::<f32>::build(&spec, 7).unwrap();
        let c = Model::<f32>::build(&spec, 8).unwrap();
        let vals = |m: &Model| m.params.iter().map(|(_, p)| p.value.clone()).collect::<Vec<_>>();
        assert_eq!(vals(&a), vals(&b));
        assert_ne!(vals(&a), vals(&c));
    }

    #[test]
    fn dasd_parameter_count_per_layer() {
        let spec = ModelSpec::preset("resnet20", &opts(AsdPolicy::Dynamic { re: 16 }, false, false)).unwrap();
        let m = Model::<f32>::build(&spec, 0).unwrap();
        for ((_, g, _), lp) in spec.binary_layers().zip(m.layer_params().iter().filter(|p| matches!(p, LayerParams::BConv { .. }))) {
            let LayerParams::BConv { dasd: Some(head), .. } = lp else { panic!("missing head") };
            let count: usize = head.iter().map(|&id| m.params.get(id).value.len()).sum();
            let c = g.in_channels;
            let h = c.div_ceil(16);
            assert_eq!(count, c * h * 2 + h + c);
        }
    }

    #[test]
    fn packed_path_refuses_train_mode() {
        let spec = ModelSpec::preset("lenet", &PresetOptions::default()).unwrap();
        let mut m = Model::<f32>::build(&spec, 0).unwrap();
        let err = m.forward(Tensor::zeros([1, 1, 28, 28]), BnMode::Train, ForwardPath::Packed).unwrap_err();
        assert!(matches!(err, Error::Unsupported(_)));
    }

    #[test]
    fn zero_input_stays_finite() {
        let spec = ModelSpec::preset("lenet", &opts(AsdPolicy::Static(AsdForm::Sigmoid), true, true)).unwrap();
        let mut m = Model::<f32>::build(&spec, 0).unwrap();
        for mode in [BnMode::Train, BnMode::Eval] {
            let y = m.forward(Tensor::zeros([3, 1, 28, 28]), mode, ForwardPath::Surrogate).unwrap();
            assert!(y.is_finite());
        }
        let y = m.forward(Tensor::zeros([3, 1, 28, 28]), BnMode::Eval, ForwardPath::Packed).unwrap();
        assert!(y.is_finite());
    }

    #[test]
    fn single_pixel_micro_model() {
        let spec = ModelSpec::preset("pixel", &opts(AsdPolicy::Static(AsdForm::Original), false, false)).unwrap();
        let mut m = Model::<f32>::build(&spec, 0).unwrap();
        let w = m.params.find("bconv1.weight").unwrap();
        m.params.get_mut(w).value = Tensor::new([2, 1, 1, 1], vec![1.0, 1.0]).unwrap();
        let x = Tensor::new([1, 1, 1, 1], vec![1.0f32]).unwrap();
        let signs = |m: &mut Model| {
            let y = m.forward(x.clone(), BnMode::Eval, ForwardPath::Packed).unwrap();
            y.map(crate::autograd::sign_value).into_data()
        };
        assert_eq!(signs(&mut m), [1.0, 1.0]);
        let beta = m.params.find("bconv1.asd_beta").unwrap();
        m.params.get_mut(beta).value = Tensor::new([1], vec![-1.5]).unwrap();
        assert_eq!(signs(&mut m), [-1.0, -1.0]);
    }

    #[test]
    fn probe_reports_each_binary_layer() {
        let spec = ModelSpec::preset("lenet", &PresetOptions::default()).unwrap();
        let mut m = Model::<f32>::build(&spec, 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let stats = m.sign_stats(Tensor::randn([4, 1, 28, 28], 1.0, &mut rng), BnMode::Train).unwrap();
        let names: Vec<_> = stats.iter().map(|s| (s.layer.as_str(), s.tensor)).collect();
        assert_eq!(
            names,
            [("bconv1", "activation"), ("bconv1", "weight"), ("bconv2", "activation"), ("bconv2", "weight")]
        );
        assert!(stats.iter().all(|s| !s.stats.degenerate));
    }

    #[test]
    fn injected_shift_forces_degeneration_on_that_layer_only() {
        let spec = ModelSpec::preset("lenet", &PresetOptions::default()).unwrap();
        let mut m = Model::<f32>::build(&spec, 0).unwrap();
        let x = Tensor::randn([4, 1, 28, 28], 1.0, &mut ChaCha8Rng::seed_from_u64(1));
        let stats = m.sign_stats_with(x.clone(), BnMode::Eval, &[("bconv2".into(), 10.0)]).unwrap();
        let flagged: Vec<_> = stats.iter().filter(|s| s.stats.degenerate).map(|s| (s.layer.as_str(), s.tensor)).collect();
        assert_eq!(flagged, [("bconv2", "activation")]);
        assert!(m.sign_stats_with(x, BnMode::Eval, &[("conv1".into(), 1.0)]).is_err());
    }
}
