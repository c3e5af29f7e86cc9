//! Inference-only packed model file.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "SDBN" | version u32 | endian tag u32 | sections...
//! section = tag [u8; 4] | length u64 | body
//! SPEC  model spec text
//! NORM  input normalization: mean f32s, std f32s
//! LAYR  one per spec layer, in order: name str, then blocks
//! block = tag [u8; 4] | length u64 | body
//! ```
//!
//! Blocks by layer kind:
//!
//! * conv, linear: `F32W` (dims, f32s) and optionally `F32B` (dims, f32s)
//! * bconv: `BITS` (bit count u64, words u64s) holding sign(w + shift) for
//!   the whole layer as one flat bitstream, bit 1 meaning +1, padding bits
//!   set; then `ASDB` (raw factor f32s) or `DASD` (four dims+f32s blocks for
//!   w1, b1, w2, b2) when the layer shifts activations, and `SCAL` (f32s)
//!   for the scaled baseline
//! * bn: `BNRM` with gamma, beta, running mean, running var (f32s each),
//!   momentum f32, eps f32
//! * everything else: no blocks
//!
//! Binary layers never carry latent weights or weight-shift factors.

use std::fs;
use std::path::Path;

use super::codec::{Reader, Writer};
use crate::binarize::{AsdFactor, DasdHead};
use crate::bitkernel::BitTensor;
use crate::data::Normalization;
use crate::error::{Error, Result};
use crate::models::{AsdPolicy, LayerKind, Model, ModelSpec, PackedLayer, PackedNet, PackedShift};
use crate::tensor::{BnState, Tensor};

pub const PACKED_MAGIC: &[u8; 4] = b"SDBN";
pub const PACKED_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct PackedFile {
    pub net: PackedNet,
    pub norm: Normalization,
}

fn tensor_block(w: &mut Writer, tag: &[u8; 4], t: &Tensor<f32>) {
    let mut b = Writer::default();
    b.dims(t.shape());
    b.f32s(t.data());
    w.section(tag, &b.buf);
}

fn floats_block(w: &mut Writer, tag: &[u8; 4], v: &[f32]) {
    let mut b = Writer::default();
    b.f32s(v);
    w.section(tag, &b.buf);
}

fn encode_layer(name: &str, layer: &PackedLayer) -> Result<Vec<u8>> {
    let mut w = Writer::default();
    w.str(name);
    match layer {
        PackedLayer::Conv { weight, bias, .. } | PackedLayer::Linear { weight, bias } => {
            tensor_block(&mut w, b"F32W", weight);
            if let Some(b) = bias {
                tensor_block(&mut w, b"F32B", b);
            }
        }
        PackedLayer::BConv { weights, shift, alpha_s, .. } => {
            let flat = weights.regroup(1)?;
            let mut b = Writer::default();
            b.u64(flat.len() as u64);
            b.u64s(flat.words());
            w.section(b"BITS", &b.buf);
            match shift {
                PackedShift::None => {}
                PackedShift::Static(f) => floats_block(&mut w, b"ASDB", f.raw.data()),
                PackedShift::Dynamic(h) => {
                    let mut b = Writer::default();
                    for t in [&h.w1, &h.b1, &h.w2, &h.b2] {
                        b.dims(t.shape());
                        b.f32s(t.data());
                    }
                    w.section(b"DASD", &b.buf);
                }
            }
            if let Some(a) = alpha_s {
                floats_block(&mut w, b"SCAL", a);
            }
        }
        PackedLayer::Bn { gamma, beta, state } => {
            let mut b = Writer::default();
            b.f32s(gamma.data());
            b.f32s(beta.data());
            b.f32s(&state.running_mean);
            b.f32s(&state.running_var);
            b.f32(state.momentum);
            b.f32(state.eps);
            w.section(b"BNRM", &b.buf);
        }
        _ => {}
    }
    Ok(w.buf)
}

pub fn encode(file: &PackedFile) -> Result<Vec<u8>> {
    file.net.check()?;
    let mut w = Writer::default();
    w.header(PACKED_MAGIC, PACKED_VERSION);
    w.section(b"SPEC", file.net.spec.to_text().as_bytes());
    let mut b = Writer::default();
    b.f32s(&file.norm.mean);
    b.f32s(&file.norm.std);
    w.section(b"NORM", &b.buf);
    for (l, layer) in file.net.spec.layers.iter().zip(&file.net.layers) {
        w.section(b"LAYR", &encode_layer(&l.name, layer)?);
    }
    Ok(w.buf)
}

/// Packs a trained model together with the normalization it was trained with.
pub fn export_packed(model: &Model<f32>, norm: &Normalization) -> Result<Vec<u8>> {
    encode(&PackedFile { net: PackedNet::from_model(model)?, norm: norm.clone() })
}

fn read_tensor(r: &mut Reader<'_>) -> Result<Tensor<f32>> {
    let dims = r.dims()?;
    Tensor::new(dims, r.f32s()?)
}

/// Blocks of one layer section, keyed by tag, in file order.
fn blocks<'a>(r: &mut Reader<'a>) -> Result<Vec<([u8; 4], &'a [u8])>> {
    let mut out = Vec::new();
    while !r.is_done() {
        out.push(r.section()?);
    }
    Ok(out)
}

fn decode_layer(kind: &LayerKind, body: &[u8]) -> Result<(String, PackedLayer)> {
    let mut r = Reader::new(body, "packed layer");
    let name = r.str()?;
    let blocks = blocks(&mut r)?;
    let tags: Vec<&[u8; 4]> = blocks.iter().map(|(t, _)| t).collect();
    let find = |tag: &[u8; 4]| blocks.iter().find(|(t, _)| t == tag).map(|(_, b)| Reader::new(b, "packed block"));
    let need = |tag: &[u8; 4]| {
        find(tag).ok_or_else(|| Error::Format(format!("layer {name}: missing {} block", String::from_utf8_lossy(tag))))
    };
    let allowed: &[&[u8; 4]] = match kind {
        LayerKind::Conv(_) | LayerKind::Linear { .. } => &[b"F32W", b"F32B"],
        LayerKind::BConv(..) => &[b"BITS", b"ASDB", b"DASD", b"SCAL"],
        LayerKind::Bn { .. } => &[b"BNRM"],
        _ => &[],
    };
    if let Some(t) = tags.iter().find(|t| !allowed.contains(t)) {
        return Err(Error::Format(format!("layer {name}: unexpected {} block", String::from_utf8_lossy(*t))));
    }
    let opt_tensor = |tag: &[u8; 4]| find(tag).map(|mut b| read_tensor(&mut b)).transpose();
    let layer = match kind {
        LayerKind::Conv(g) => PackedLayer::Conv { geom: *g, weight: read_tensor(&mut need(b"F32W")?)?, bias: opt_tensor(b"F32B")? },
        LayerKind::Linear { .. } => {
            PackedLayer::Linear { weight: read_tensor(&mut need(b"F32W")?)?, bias: opt_tensor(b"F32B")? }
        }
        LayerKind::BConv(g, policy) => {
            let mut b = need(b"BITS")?;
            let bits = b.u64()? as usize;
            let words = b.u64s()?;
            b.finish()?;
            let shape = g.weight_shape().to_vec();
            if bits != shape.iter().product::<usize>() {
                return Err(Error::Format(format!("layer {name}: {bits} bits for weights of shape {shape:?}")));
            }
            let weights = BitTensor::from_words(shape, 1, words)?.regroup(g.out_channels)?;
            let shift = match policy.asd {
                AsdPolicy::Off => PackedShift::None,
                AsdPolicy::Static(form) => {
                    let raw = need(b"ASDB")?.f32s()?;
                    PackedShift::Static(AsdFactor { raw: Tensor::new([raw.len()], raw)?, form })
                }
                AsdPolicy::Dynamic { re } => {
                    let mut b = need(b"DASD")?;
                    let (w1, b1, w2, b2) = (read_tensor(&mut b)?, read_tensor(&mut b)?, read_tensor(&mut b)?, read_tensor(&mut b)?);
                    b.finish()?;
                    PackedShift::Dynamic(DasdHead { re, w1, b1, w2, b2 })
                }
            };
            let alpha_s = find(b"SCAL").map(|mut b| b.f32s()).transpose()?;
            PackedLayer::BConv { geom: *g, weights, shift, alpha_s }
        }
        LayerKind::Bn { .. } => {
            let mut b = need(b"BNRM")?;
            let gamma = b.f32s()?;
            let beta = b.f32s()?;
            let state = BnState { running_mean: b.f32s()?, running_var: b.f32s()?, momentum: b.f32()?, eps: b.f32()? };
            b.finish()?;
            PackedLayer::Bn { gamma: Tensor::new([gamma.len()], gamma)?, beta: Tensor::new([beta.len()], beta)?, state }
        }
        LayerKind::Act(a) => PackedLayer::Act(*a),
        LayerKind::MaxPool { kernel, stride } => PackedLayer::MaxPool { kernel: *kernel, stride: *stride },
        LayerKind::Gap => PackedLayer::Gap,
        LayerKind::Flatten => PackedLayer::Flatten,
        LayerKind::Save => PackedLayer::Save,
        LayerKind::Add { from, stride, out_channels } => {
            PackedLayer::Add { from: from.clone(), stride: *stride, out_channels: *out_channels }
        }
    };
    Ok((name, layer))
}

pub fn load_packed(bytes: &[u8]) -> Result<PackedFile> {
    let mut r = Reader::new(bytes, "packed model");
    r.header(PACKED_MAGIC, PACKED_VERSION)?;
    let spec_text = String::from_utf8(r.expect(b"SPEC")?.to_vec())
        .map_err(|_| Error::Format("packed model spec is not UTF-8".into()))?;
    let spec = ModelSpec::parse(&spec_text)?;
    let mut b = Reader::new(r.expect(b"NORM")?, "packed normalization");
    let norm = Normalization { mean: b.f32s()?, std: b.f32s()? };
    b.finish()?;
    let mut layers = Vec::with_capacity(spec.layers.len());
    for l in &spec.layers {
        let (name, layer) = decode_layer(&l.kind, r.expect(b"LAYR")?)?;
        if name != l.name {
            return Err(Error::Format(format!("packed layer {name:?} where the spec has {:?}", l.name)));
        }
        layers.push(layer);
    }
    r.finish()?;
    let net = PackedNet { spec, layers };
    net.check()?;
    Ok(PackedFile { net, norm })
}

pub fn write_packed(path: &Path, model: &Model<f32>, norm: &Normalization) -> Result<()> {
    fs::write(path, export_packed(model, norm)?)?;
    Ok(())
}

pub fn read_packed(path: &Path) -> Result<PackedFile> {
    load_packed(&fs::read(path)?)
}

/// One payload block of a packed file.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BlockInfo {
    pub layer: String,
    pub binary: bool,
    pub tag: String,
    pub bytes: usize,
}

/// Lists every layer block, for format-level inspection.
pub fn inventory(bytes: &[u8]) -> Result<Vec<BlockInfo>> {
    let file = load_packed(bytes)?;
    let mut r = Reader::new(bytes, "packed model");
    r.header(PACKED_MAGIC, PACKED_VERSION)?;
    r.expect(b"SPEC")?;
    r.expect(b"NORM")?;
    let mut out = Vec::new();
    for l in &file.net.spec.layers {
        let mut lr = Reader::new(r.expect(b"LAYR")?, "packed layer");
        let name = lr.str()?;
        for (tag, body) in blocks(&mut lr)? {
            out.push(BlockInfo {
                layer: name.clone(),
                binary: matches!(l.kind, LayerKind::BConv(..)),
                tag: String::from_utf8_lossy(&tag).into_owned(),
                bytes: body.len(),
            });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::SteKind;
    use crate::binarize::AsdForm;
    use crate::models::{BinaryPolicy, ForwardPath, PresetOptions};
    use crate::tensor::BnMode;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn perturbed(name: &str, asd: AsdPolicy, scale: bool) -> Model<f32> {
        let policy = BinaryPolicy { asd, wsd: true, scale, ste: SteKind::ClipSte };
        let spec = ModelSpec::preset(name, &PresetOptions { policy, ..PresetOptions::default() }).unwrap();
        let mut m = Model::build(&spec, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for p in m.params.iter_mut() {
            for v in p.value.data_mut() {
                *v += rng.gen_range(-0.3..0.3);
            }
        }
        for s in m.bn_states.iter_mut() {
            for v in s.running_mean.iter_mut() {
                *v = rng.gen_range(-0.5..0.5);
            }
        }
        m
    }

    fn norm(c: usize) -> Normalization {
        Normalization { mean: vec![0.25; c], std: vec![0.5; c] }
    }

    #[test]
    fn round_trip_preserves_the_network() {
        for asd in [AsdPolicy::Off, AsdPolicy::Static(AsdForm::Tanh), AsdPolicy::Dynamic { re: 4 }] {
            for scale in [false, true] {
                let mut m = perturbed("resnet20", asd, scale);
                let bytes = export_packed(&m, &norm(3)).unwrap();
                let file = load_packed(&bytes).unwrap();
                assert_eq!(file.net, PackedNet::from_model(&m).unwrap());
                assert_eq!(encode(&file).unwrap(), bytes);
                let x = Tensor::randn([2, 3, 32, 32], 1.0, &mut ChaCha8Rng::seed_from_u64(1));
                let direct = m.forward(x.clone(), BnMode::Eval, ForwardPath::Packed).unwrap();
                assert_eq!(file.net.forward(&x).unwrap(), direct);
            }
        }
    }

    #[test]
    fn binary_layers_carry_no_float_weights() {
        let m = perturbed("lenet", AsdPolicy::Static(AsdForm::Sigmoid), false);
        let bytes = export_packed(&m, &norm(1)).unwrap();
        let inv = inventory(&bytes).unwrap();
        let binary: Vec<_> = inv.iter().filter(|b| b.binary).collect();
        assert!(!binary.is_empty());
        assert!(binary.iter().all(|b| b.tag == "BITS" || b.tag == "ASDB"), "{binary:?}");
        // bconv2: 32 x 32 x 3 x 3 = 9216 weights -> 144 words
        let bits = binary.iter().find(|b| b.layer == "bconv2" && b.tag == "BITS").unwrap();
        assert_eq!(bits.bytes, 8 + 4 + 144 * 8);
    }

    #[test]
    fn flat_bitstream_of_4608_weights_is_72_words() {
        let spec = ModelSpec::parse(
            "model name=w input=32x8x8 classes=2\n\
             bconv name=b in=32 out=16 k=3 s=1 p=1 asd=off wsd=on scale=off ste=clip\n\
             bn name=n c=16\n\
             gap name=g\n\
             linear name=fc in=16 out=2 bias=false\n",
        )
        .unwrap();
        let m = Model::<f32>::build(&spec, 0).unwrap();
        let inv = inventory(&export_packed(&m, &norm(32)).unwrap()).unwrap();
        let bits = inv.iter().find(|b| b.tag == "BITS").unwrap();
        assert_eq!((bits.bytes - 12) / 8, 72);
        assert_eq!(4608 / 64, 72);
    }

    #[test]
    fn corrupted_files_are_rejected() {
        let m = perturbed("pixel", AsdPolicy::Off, false);
        let bytes = export_packed(&m, &norm(1)).unwrap();
        let mut bad = bytes.clone();
        bad[..4].copy_from_slice(b"SDCK");
        assert!(load_packed(&bad).unwrap_err().to_string().contains("magic"));
        let mut newer = bytes.clone();
        newer[4] = 9;
        assert!(load_packed(&newer).unwrap_err().to_string().contains("version"));
        assert!(load_packed(&bytes[..bytes.len() - 1]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(load_packed(&extra).is_err());
    }
}
