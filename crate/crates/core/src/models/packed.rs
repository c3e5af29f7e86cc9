use std::collections::HashMap;

use super::{Activation, AsdPolicy, LayerKind, LayerParams, Model, ModelSpec};
use crate::autograd::downsample_forward;
use crate::binarize::{activation_scale, apply_scaling, weight_scale, AsdFactor, DasdHead, WsdFactor};
use crate::bitkernel::{bitconv2d, words_for, BitTensor, OpCounts, PackedConvPlan, WORD_BITS};
use crate::error::{Error, Result};
use crate::tensor::{
    batchnorm2d, conv2d, global_avg_pool, hardtanh, linear, maxpool2d, relu, sigmoid, tanh, BnMode, BnState,
    ConvGeometry, Tensor,
};

/// Activation shift of a packed binary layer.
#[derive(Clone, Debug, PartialEq)]
pub enum PackedShift {
    None,
    Static(AsdFactor<f32>),
    Dynamic(DasdHead<f32>),
}

#[derive(Clone, Debug, PartialEq)]
pub enum PackedLayer {
    Conv { geom: ConvGeometry, weight: Tensor<f32>, bias: Option<Tensor<f32>> },
    /// Binary weights with any weight shift already folded in.
    BConv { geom: ConvGeometry, weights: BitTensor, shift: PackedShift, alpha_s: Option<Vec<f32>> },
    Bn { gamma: Tensor<f32>, beta: Tensor<f32>, state: BnState<f32> },
    Act(Activation),
    MaxPool { kernel: usize, stride: usize },
    Gap,
    Flatten,
    Linear { weight: Tensor<f32>, bias: Option<Tensor<f32>> },
    Save,
    Add { from: String, stride: usize, out_channels: usize },
}

/// Inference-only network: binary layers hold sign bits, never latent weights.
#[derive(Clone, Debug, PartialEq)]
pub struct PackedNet {
    pub spec: ModelSpec,
    pub layers: Vec<PackedLayer>,
}

impl PackedNet {
    pub fn from_model(model: &Model<f32>) -> Result<PackedNet> {
        let spec = model.spec().clone();
        let p = &model.params;
        let v = |id| p.value(id).clone();
        let mut layers = Vec::with_capacity(spec.layers.len());
        for (l, lp) in spec.layers.iter().zip(model.layer_params()) {
            let layer = match (&l.kind, lp) {
                (LayerKind::Conv(geom), LayerParams::Conv { weight, bias }) => {
                    PackedLayer::Conv { geom: *geom, weight: v(*weight), bias: bias.map(v) }
                }
                (LayerKind::BConv(geom, policy), LayerParams::BConv { weight, asd, dasd, wsd }) => {
                    let w_r = p.value(*weight);
                    let folded = match wsd {
                        Some(raw) => WsdFactor { raw: v(*raw) }.shifted(w_r)?,
                        None => w_r.clone(),
                    };
                    let shift = match (policy.asd, asd, dasd) {
                        (AsdPolicy::Static(form), Some(raw), _) => PackedShift::Static(AsdFactor { raw: v(*raw), form }),
                        (AsdPolicy::Dynamic { re }, _, Some([w1, b1, w2, b2])) => PackedShift::Dynamic(DasdHead {
                            re,
                            w1: v(*w1),
                            b1: v(*b1),
                            w2: v(*w2),
                            b2: v(*b2),
                        }),
                        _ => PackedShift::None,
                    };
                    PackedLayer::BConv {
                        geom: *geom,
                        weights: BitTensor::pack(&folded),
                        shift,
                        alpha_s: if policy.scale { Some(weight_scale(w_r)?) } else { None },
                    }
                }
                (LayerKind::Bn { .. }, LayerParams::Bn { gamma, beta, state }) => PackedLayer::Bn {
                    gamma: v(*gamma),
                    beta: v(*beta),
                    state: model.bn_states[*state].clone(),
                },
                (LayerKind::Act(a), _) => PackedLayer::Act(*a),
                (LayerKind::MaxPool { kernel, stride }, _) => PackedLayer::MaxPool { kernel: *kernel, stride: *stride },
                (LayerKind::Gap, _) => PackedLayer::Gap,
                (LayerKind::Flatten, _) => PackedLayer::Flatten,
                (LayerKind::Linear { .. }, LayerParams::Linear { weight, bias }) => {
                    PackedLayer::Linear { weight: v(*weight), bias: bias.map(v) }
                }
                (LayerKind::Save, _) => PackedLayer::Save,
                (LayerKind::Add { from, stride, out_channels }, _) => {
                    PackedLayer::Add { from: from.clone(), stride: *stride, out_channels: *out_channels }
                }
                (kind, lp) => return Err(Error::State(format!("layer {} ({kind:?}) has parameters {lp:?}", l.name))),
            };
            layers.push(layer);
        }
        let net = PackedNet { spec, layers };
        net.check()?;
        Ok(net)
    }

    /// Checks that every layer payload agrees with the spec.
    pub fn check(&self) -> Result<()> {
        self.spec.validate()?;
        if self.layers.len() != self.spec.layers.len() {
            return Err(Error::Format(format!(
                "{} packed layers for a spec of {}",
                self.layers.len(),
                self.spec.layers.len()
            )));
        }
        for (l, p) in self.spec.layers.iter().zip(&self.layers) {
            let bad = |m: String| Err(Error::Format(format!("layer {}: {m}", l.name)));
            match (&l.kind, p) {
                (LayerKind::Conv(g), PackedLayer::Conv { geom, weight, bias }) => {
                    if g != geom || weight.shape() != g.weight_shape() || bias.is_some() != g.has_bias {
                        return bad("conv payload does not match the spec".into());
                    }
                }
                (LayerKind::BConv(g, pol), PackedLayer::BConv { geom, weights, shift, alpha_s }) => {
                    if g != geom || weights.shape() != g.weight_shape() || weights.rows() != g.out_channels {
                        return bad("binary weights do not match the spec".into());
                    }
                    let shift_ok = match (pol.asd, shift) {
                        (AsdPolicy::Off, PackedShift::None) => true,
                        (AsdPolicy::Static(form), PackedShift::Static(f)) => f.form == form && f.channels() == g.in_channels,
                        (AsdPolicy::Dynamic { re }, PackedShift::Dynamic(h)) => {
                            h.re == re && h.channels() == g.in_channels && h.w1.shape() == [h.hidden(), g.in_channels]
                        }
                        _ => false,
                    };
                    if !shift_ok || alpha_s.as_ref().map(|a| a.len()) != pol.scale.then_some(g.out_channels) {
                        return bad("binary layer factors do not match the spec".into());
                    }
                }
                (LayerKind::Bn { channels }, PackedLayer::Bn { gamma, beta, state }) => {
                    if gamma.len() != *channels || beta.len() != *channels || state.channels() != *channels {
                        return bad("bn payload does not match the spec".into());
                    }
                }
                (LayerKind::Linear { in_features, out_features, bias: has_bias }, PackedLayer::Linear { weight, bias }) => {
                    if weight.shape() != [*out_features, *in_features] || bias.is_some() != *has_bias {
                        return bad("linear payload does not match the spec".into());
                    }
                }
                (LayerKind::Act(a), PackedLayer::Act(b)) if a == b => {}
                (LayerKind::MaxPool { kernel, stride }, PackedLayer::MaxPool { kernel: k, stride: s })
                    if kernel == k && stride == s => {}
                (LayerKind::Gap, PackedLayer::Gap) | (LayerKind::Flatten, PackedLayer::Flatten) | (LayerKind::Save, PackedLayer::Save) => {}
                (LayerKind::Add { from, stride, out_channels }, PackedLayer::Add { from: f, stride: s, out_channels: o })
                    if from == f && stride == s && out_channels == o => {}
                _ => return bad("payload kind does not match the spec".into()),
            }
        }
        Ok(())
    }

    pub fn forward(&self, x: &Tensor<f32>) -> Result<Tensor<f32>> {
        Ok(self.forward_counted(x)?.0)
    }

    /// Logits plus the elementwise float work done around binary convolutions.
    pub fn forward_counted(&self, x: &Tensor<f32>) -> Result<(Tensor<f32>, OpCounts)> {
        let [_, c, h, w] = x.dims4()?;
        if [c, h, w] != self.spec.input {
            return Err(Error::shape(format!("packed model expects [N, {:?}], got {:?}", self.spec.input, x.shape())));
        }
        let mut counts = OpCounts::default();
        let mut cur = x.clone();
        let mut saved: HashMap<&str, Tensor<f32>> = HashMap::new();
        for (l, layer) in self.spec.layers.iter().zip(&self.layers) {
            cur = match layer {
                PackedLayer::Conv { geom, weight, bias } => conv2d(&cur, weight, bias.as_ref(), geom, 0.0)?,
                PackedLayer::BConv { geom, weights, shift, alpha_s } => {
                    let shifted = match shift {
                        PackedShift::None => None,
                        PackedShift::Static(f) => Some(f.shift(&cur)?),
                        PackedShift::Dynamic(head) => Some(head.shift(&cur)?),
                    };
                    if shifted.is_some() {
                        counts.pre_conv_adds += cur.len() as u64;
                    }
                    let [_, _, h, w] = cur.dims4()?;
                    let plan = PackedConvPlan::new(*geom, h, w)?;
                    let z = bitconv2d::<f32>(&BitTensor::pack(shifted.as_ref().unwrap_or(&cur)), weights, &plan)?;
                    match alpha_s {
                        Some(alpha) => {
                            let beta = activation_scale(&cur)?;
                            counts.post_conv_muls += 2 * z.len() as u64;
                            apply_scaling(&z, alpha, &beta)
                        }
                        None => z,
                    }
                }
                PackedLayer::Bn { gamma, beta, state } => {
                    let mut st = state.clone();
                    batchnorm2d(&cur, gamma, beta, &mut st, BnMode::Eval)?.0
                }
                PackedLayer::Act(a) => match a {
                    Activation::Relu => relu(&cur),
                    Activation::Hardtanh => hardtanh(&cur),
                    Activation::Sigmoid => sigmoid(&cur),
                    Activation::Tanh => tanh(&cur),
                },
                PackedLayer::MaxPool { kernel, stride } => maxpool2d(&cur, *kernel, *stride)?.0,
                PackedLayer::Gap => global_avg_pool(&cur)?,
                PackedLayer::Flatten => {
                    let n = cur.shape()[0];
                    let f = cur.len() / n.max(1);
                    cur.reshape([n, f])?
                }
                PackedLayer::Linear { weight, bias } => linear(&cur, weight, bias.as_ref())?,
                PackedLayer::Save => {
                    saved.insert(l.name.as_str(), cur.clone());
                    cur
                }
                PackedLayer::Add { from, stride, out_channels } => {
                    let src = saved
                        .get(from.as_str())
                        .ok_or_else(|| Error::Spec(format!("shortcut source {from:?} was never saved")))?;
                    let c = src.shape()[1];
                    if *stride != 1 || *out_channels != c {
                        cur.add(&downsample_forward(src, *stride, *out_channels)?)?
                    } else {
                        cur.add(src)?
                    }
                }
            };
        }
        Ok((cur, counts))
    }

    /// Bits of binary weight payload as stored on disk (one flat bitstream
    /// per layer) and the bits of the float weights they replace.
    pub fn binary_payload(&self) -> (usize, usize) {
        self.layers
            .iter()
            .filter_map(|l| match l {
                PackedLayer::BConv { weights, .. } => Some((words_for(weights.len()) * WORD_BITS, weights.len() * 32)),
                _ => None,
            })
            .fold((0, 0), |(a, b), (x, y)| (a + x, b + y))
    }
}

#[cfg(test)]
mod tests {
    use super::super::{ForwardPath, PresetOptions};
    use super::*;
    use crate::autograd::SteKind;
    use crate::binarize::AsdForm;
    use crate::models::BinaryPolicy;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn policies() -> Vec<BinaryPolicy> {
        let ste = SteKind::ClipSte;
        vec![
            BinaryPolicy { asd: AsdPolicy::Off, wsd: false, scale: false, ste },
            BinaryPolicy { asd: AsdPolicy::Static(AsdForm::Sigmoid), wsd: true, scale: false, ste },
            BinaryPolicy { asd: AsdPolicy::Static(AsdForm::Tanh), wsd: false, scale: true, ste },
            BinaryPolicy { asd: AsdPolicy::Dynamic { re: 4 }, wsd: true, scale: false, ste },
        ]
    }

    /// Gives BN layers non-trivial running statistics and the factors
    /// non-zero values so the comparison exercises every path.
    fn perturb(m: &mut Model<f32>, rng: &mut ChaCha8Rng) {
        for p in m.params.iter_mut() {
            if p.name.ends_with("asd_beta") || p.name.ends_with("wsd_alpha") || p.name.contains(".dasd.b") {
                p.value = Tensor::randn(p.value.shape().to_vec(), 1.0, rng);
            }
        }
        for s in &mut m.bn_states {
            for v in s.running_mean.iter_mut() {
                *v = Tensor::<f32>::randn([1], 0.5, rng).data()[0];
            }
            for v in s.running_var.iter_mut() {
                *v = 0.5 + Tensor::<f32>::rand_uniform([1], 0.0, 2.0, rng).data()[0];
            }
        }
    }

    #[test]
    fn packed_and_surrogate_logits_agree_for_every_preset() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for (name, bireal) in [("lenet", true), ("resnet20", true), ("resnet20", false), ("vgg_small_lite", true)] {
            for (i, policy) in policies().into_iter().enumerate() {
                let opts = PresetOptions { policy, bireal_shortcuts: bireal, ..Default::default() };
                let spec = ModelSpec::preset(name, &opts).unwrap();
                let seeds: &[u64] = if name == "vgg_small_lite" { &[0] } else { &[0, 1, 2] };
                for &seed in seeds {
                    let mut m = Model::<f32>::build(&spec, seed + i as u64).unwrap();
                    perturb(&mut m, &mut rng);
                    let [c, h, w] = spec.input;
                    let x = Tensor::randn([2, c, h, w], 1.0, &mut rng);
                    let a = m.forward(x.clone(), BnMode::Eval, ForwardPath::Surrogate).unwrap();
                    let b = m.forward(x, BnMode::Eval, ForwardPath::Packed).unwrap();
                    assert_eq!(a, b, "{name} policy {i} seed {seed}");
                }
            }
        }
    }

    #[test]
    fn shift_only_network_has_no_post_conv_multiplies() {
        let spec = ModelSpec::preset("lenet", &PresetOptions::default()).unwrap();
        let m = Model::<f32>::build(&spec, 0).unwrap();
        let net = PackedNet::from_model(&m).unwrap();
        let (_, counts) = net.forward_counted(&Tensor::ones([2, 1, 28, 28])).unwrap();
        assert_eq!(counts.post_conv_muls, 0);
        assert_eq!(counts.pre_conv_adds, 2 * (16 * 14 * 14 + 32 * 7 * 7));

        let scaled = PresetOptions { policy: policies()[2], ..Default::default() };
        let m = Model::<f32>::build(&ModelSpec::preset("lenet", &scaled).unwrap(), 0).unwrap();
        let (_, counts) = PackedNet::from_model(&m).unwrap().forward_counted(&Tensor::ones([2, 1, 28, 28])).unwrap();
        assert!(counts.post_conv_muls > 0);
    }

    #[test]
    fn payload_is_a_thirty_second_of_float_weights() {
        let spec = ModelSpec::preset("resnet20", &PresetOptions::default()).unwrap();
        let net = PackedNet::from_model(&Model::build(&spec, 0).unwrap()).unwrap();
        let (bits, float_bits) = net.binary_payload();
        assert_eq!(bits * 32, float_bits);
    }
}
