//! Declarative network descriptions and their flat text form.
//!
//! ```text
//! model name=lenet input=1x28x28 classes=10
//! # free-form note lines
//! conv name=conv1 in=1 out=16 k=3 s=1 p=1 bias=false
//! bn name=bn1 c=16
//! act name=act1 fn=hardtanh
//! bconv name=conv2 in=16 out=32 k=3 s=1 p=1 asd=sigmoid wsd=on scale=off ste=clip
//! save name=skip1
//! add name=add1 from=skip1 s=2 out=32
//! ```
//!
//! Layers run in file order. `save` stashes the current tensor under its name
//! and a later `add` sums it back in, after option-A downsampling when the
//! stride or channel count changes. Since `add` can only name an earlier
//! `save`, every spec is a DAG.

use std::cell::RefCell;
use std::collections::{BTreeMap, HashSet};
use std::fmt::{self, Write as _};
use std::str::FromStr;

use crate::autograd::SteKind;
use crate::binarize::AsdForm;
use crate::error::{Error, Result};
use crate::tensor::ConvGeometry;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum AsdPolicy {
    #[default]
    Off,
    Static(AsdForm),
    Dynamic { re: usize },
}

impl fmt::Display for AsdPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AsdPolicy::Off => f.write_str("off"),
            AsdPolicy::Static(form) => write!(f, "{form}"),
            AsdPolicy::Dynamic { re } => write!(f, "dasd:{re}"),
        }
    }
}

impl FromStr for AsdPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "off" {
            return Ok(AsdPolicy::Off);
        }
        if let Some(re) = s.strip_prefix("dasd:") {
            let re: usize = re.parse().map_err(|_| Error::Config(format!("bad DASD reduction in {s:?}")))?;
            if re == 0 {
                return Err(Error::Config("DASD reduction ratio must be >= 1".into()));
            }
            return Ok(AsdPolicy::Dynamic { re });
        }
        s.parse().map(AsdPolicy::Static)
    }
}

/// How a binary convolution shapes and scales its operands.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct BinaryPolicy {
    pub asd: AsdPolicy,
    pub wsd: bool,
    /// Multiply the output by analytic scaling factors (the baseline).
    pub scale: bool,
    pub ste: SteKind,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Hardtanh,
    Sigmoid,
    Tanh,
}

impl Activation {
    pub fn as_str(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Hardtanh => "hardtanh",
            Activation::Sigmoid => "sigmoid",
            Activation::Tanh => "tanh",
        }
    }
}

impl FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "relu" => Ok(Activation::Relu),
            "hardtanh" => Ok(Activation::Hardtanh),
            "sigmoid" => Ok(Activation::Sigmoid),
            "tanh" => Ok(Activation::Tanh),
            other => Err(Error::Spec(format!("unknown activation {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum LayerKind {
    /// Full-precision convolution, zero padded.
    Conv(ConvGeometry),
    /// Binary convolution, padded with `+1`.
    BConv(ConvGeometry, BinaryPolicy),
    Bn { channels: usize },
    Act(Activation),
    MaxPool { kernel: usize, stride: usize },
    Gap,
    Flatten,
    Linear { in_features: usize, out_features: usize, bias: bool },
    Save,
    Add { from: String, stride: usize, out_channels: usize },
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerSpec {
    pub name: String,
    pub kind: LayerKind,
}

/// Shape of one sample: `[C, H, W]` or `[F]`.
pub type SampleShape = Vec<usize>;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelSpec {
    pub name: String,
    pub input: [usize; 3],
    pub classes: usize,
    pub notes: Vec<String>,
    pub layers: Vec<LayerSpec>,
}

fn on_off(b: bool) -> &'static str {
    if b {
        "on"
    } else {
        "off"
    }
}

fn parse_on_off(key: &str, v: &str) -> Result<bool> {
    match v {
        "on" | "true" => Ok(true),
        "off" | "false" => Ok(false),
        _ => Err(Error::Spec(format!("{key} must be on or off, got {v:?}"))),
    }
}

impl LayerSpec {
    fn to_line(&self) -> String {
        let n = &self.name;
        match &self.kind {
            LayerKind::Conv(g) => format!(
                "conv name={n} in={} out={} k={} s={} p={} bias={}",
                g.in_channels, g.out_channels, g.kernel, g.stride, g.padding, g.has_bias
            ),
            LayerKind::BConv(g, p) => format!(
                "bconv name={n} in={} out={} k={} s={} p={} asd={} wsd={} scale={} ste={}",
                g.in_channels,
                g.out_channels,
                g.kernel,
                g.stride,
                g.padding,
                p.asd,
                on_off(p.wsd),
                on_off(p.scale),
                p.ste
            ),
            LayerKind::Bn { channels } => format!("bn name={n} c={channels}"),
            LayerKind::Act(a) => format!("act name={n} fn={}", a.as_str()),
            LayerKind::MaxPool { kernel, stride } => format!("maxpool name={n} k={kernel} s={stride}"),
            LayerKind::Gap => format!("gap name={n}"),
            LayerKind::Flatten => format!("flatten name={n}"),
            LayerKind::Linear { in_features, out_features, bias } => {
                format!("linear name={n} in={in_features} out={out_features} bias={bias}")
            }
            LayerKind::Save => format!("save name={n}"),
            LayerKind::Add { from, stride, out_channels } => {
                format!("add name={n} from={from} s={stride} out={out_channels}")
            }
        }
    }

    fn parse_line(line: &str, lineno: usize) -> Result<Self> {
        let err = |m: String| Error::Spec(format!("line {lineno}: {m}"));
        let mut toks = line.split_whitespace();
        let kind = toks.next().ok_or_else(|| err("empty layer line".into()))?;
        let mut kv = BTreeMap::new();
        for t in toks {
            let (k, v) = t.split_once('=').ok_or_else(|| err(format!("expected key=value, got {t:?}")))?;
            if kv.insert(k, v).is_some() {
                return Err(err(format!("duplicate key {k}")));
            }
        }
        let used: RefCell<HashSet<&str>> = RefCell::new(HashSet::new());
        let get = |k: &'static str| -> Result<&str> {
            used.borrow_mut().insert(k);
            kv.get(k).copied().ok_or_else(|| err(format!("{kind} layer needs {k}=")))
        };
        let num = |v: &str, k: &str| v.parse::<usize>().map_err(|_| err(format!("{k} must be a non-negative integer")));
        let bool_of = |v: &str, k: &str| v.parse::<bool>().map_err(|_| err(format!("{k} must be true or false")));
        let name = get("name")?.to_string();
        let geom = || -> Result<ConvGeometry> {
            let g = ConvGeometry::new(num(get("in")?, "in")?, num(get("out")?, "out")?, num(get("k")?, "k")?)
                .stride(num(get("s")?, "s")?)
                .padding(num(get("p")?, "p")?);
            g.validate().map_err(|e| err(e.to_string()))?;
            Ok(g)
        };
        let kind = match kind {
            "conv" => {
                let g = geom()?;
                LayerKind::Conv(g.with_bias(bool_of(get("bias")?, "bias")?))
            }
            "bconv" => {
                let g = geom()?;
                let policy = BinaryPolicy {
                    asd: get("asd")?.parse().map_err(|e: Error| err(e.to_string()))?,
                    wsd: parse_on_off("wsd", get("wsd")?)?,
                    scale: parse_on_off("scale", get("scale")?)?,
                    ste: get("ste")?.parse().map_err(|e: Error| err(e.to_string()))?,
                };
                LayerKind::BConv(g, policy)
            }
            "bn" => LayerKind::Bn { channels: num(get("c")?, "c")? },
            "act" => LayerKind::Act(get("fn")?.parse()?),
            "maxpool" => LayerKind::MaxPool { kernel: num(get("k")?, "k")?, stride: num(get("s")?, "s")? },
            "gap" => LayerKind::Gap,
            "flatten" => LayerKind::Flatten,
            "linear" => LayerKind::Linear {
                in_features: num(get("in")?, "in")?,
                out_features: num(get("out")?, "out")?,
                bias: bool_of(get("bias")?, "bias")?,
            },
            "save" => LayerKind::Save,
            "add" => LayerKind::Add {
                from: get("from")?.to_string(),
                stride: num(get("s")?, "s")?,
                out_channels: num(get("out")?, "out")?,
            },
            other => return Err(err(format!("unknown layer kind {other:?}"))),
        };
        if let Some(k) = kv.keys().find(|k| !used.borrow().contains(*k)) {
            return Err(err(format!("unknown key {k}")));
        }
        Ok(LayerSpec { name, kind })
    }
}

impl ModelSpec {
    pub fn to_text(&self) -> String {
        let [c, h, w] = self.input;
        let mut s = format!("model name={} input={c}x{h}x{w} classes={}\n", self.name, self.classes);
        for n in &self.notes {
            let _ = writeln!(s, "# {n}");
        }
        for l in &self.layers {
            s.push_str(&l.to_line());
            s.push('\n');
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let (_, header) = lines.next().ok_or_else(|| Error::Spec("empty model spec".into()))?;
        let mut toks = header.split_whitespace();
        if toks.next() != Some("model") {
            return Err(Error::Spec("model spec must start with a `model` line".into()));
        }
        let kv: BTreeMap<&str, &str> = toks.filter_map(|t| t.split_once('=')).collect();
        let get = |k: &str| kv.get(k).copied().ok_or_else(|| Error::Spec(format!("model line needs {k}=")));
        let dims: Vec<usize> = get("input")?
            .split('x')
            .map(|d| d.parse().map_err(|_| Error::Spec("input must be CxHxW".into())))
            .collect::<Result<_>>()?;
        let [c, h, w] = dims[..] else { return Err(Error::Spec("input must be CxHxW".into())) };
        let mut spec = ModelSpec {
            name: get("name")?.to_string(),
            input: [c, h, w],
            classes: get("classes")?.parse().map_err(|_| Error::Spec("bad classes".into()))?,
            notes: Vec::new(),
            layers: Vec::new(),
        };
        for (i, line) in lines {
            let line = line.trim();
            if let Some(note) = line.strip_prefix('#') {
                spec.notes.push(note.trim().to_string());
            } else {
                spec.layers.push(LayerSpec::parse_line(line, i + 1)?);
            }
        }
        spec.validate()?;
        Ok(spec)
    }

    /// Traces sample shapes through the network and checks every structural
    /// rule. Returns the output shape of each layer.
    pub fn validate(&self) -> Result<Vec<SampleShape>> {
        let err = |i: usize, m: String| Error::Spec(format!("layer {} ({}): {m}", i, self.layers[i].name));
        let mut names = HashSet::new();
        let mut saved: BTreeMap<&str, SampleShape> = BTreeMap::new();
        let mut shape: SampleShape = self.input.to_vec();
        let mut out = Vec::with_capacity(self.layers.len());
        if self.input.contains(&0) {
            return Err(Error::Spec(format!("input {:?} has a zero dimension", self.input)));
        }
        for (i, l) in self.layers.iter().enumerate() {
            if l.name.is_empty() || !names.insert(l.name.as_str()) {
                return Err(err(i, "layer names must be unique and non-empty".into()));
            }
            let chw = |s: &SampleShape| -> Result<[usize; 3]> {
                match s[..] {
                    [c, h, w] => Ok([c, h, w]),
                    _ => Err(err(i, format!("expects a [C, H, W] input, got {s:?}"))),
                }
            };
            shape = match &l.kind {
                LayerKind::Conv(g) | LayerKind::BConv(g, _) => {
                    let [c, h, w] = chw(&shape)?;
                    if c != g.in_channels {
                        return Err(err(i, format!("expects {} input channels, got {c}", g.in_channels)));
                    }
                    let (oh, ow) = g.output_hw(h, w).map_err(|e| err(i, e.to_string()))?;
                    if matches!(l.kind, LayerKind::BConv(..)) {
                        match self.layers.get(i + 1).map(|n| &n.kind) {
                            Some(LayerKind::Bn { .. }) => {}
                            _ => return Err(err(i, "a binary convolution must be followed by bn".into())),
                        }
                    }
                    vec![g.out_channels, oh, ow]
                }
                LayerKind::Bn { channels } => {
                    if shape.len() == 2 || shape[0] != *channels {
                        return Err(err(i, format!("bn over {channels} channels on {shape:?}")));
                    }
                    shape
                }
                LayerKind::Act(_) => shape,
                LayerKind::MaxPool { kernel, stride } => {
                    let [c, h, w] = chw(&shape)?;
                    if *kernel == 0 || *stride == 0 || h < *kernel || w < *kernel {
                        return Err(err(i, format!("maxpool {kernel}/{stride} on {h}x{w}")));
                    }
                    vec![c, (h - kernel) / stride + 1, (w - kernel) / stride + 1]
                }
                LayerKind::Gap => vec![chw(&shape)?[0]],
                LayerKind::Flatten => vec![shape.iter().product()],
                LayerKind::Linear { in_features, out_features, .. } => {
                    if shape.len() != 1 || shape[0] != *in_features {
                        return Err(err(i, format!("linear expects [{in_features}], got {shape:?}")));
                    }
                    vec![*out_features]
                }
                LayerKind::Save => {
                    saved.insert(l.name.as_str(), shape.clone());
                    shape
                }
                LayerKind::Add { from, stride, out_channels } => {
                    let src = saved.get(from.as_str()).ok_or_else(|| {
                        err(i, format!("shortcut source {from:?} is not an earlier save (the graph must be acyclic)"))
                    })?;
                    let [sc, sh, sw] = chw(src)?;
                    if *stride == 0 || *out_channels < sc {
                        return Err(err(i, format!("shortcut from {sc} to {out_channels} channels, stride {stride}")));
                    }
                    let down = vec![*out_channels, sh.div_ceil(*stride), sw.div_ceil(*stride)];
                    if down != shape {
                        return Err(err(i, format!("shortcut shape {down:?} does not match {shape:?}")));
                    }
                    shape
                }
            };
            out.push(shape.clone());
        }
        if shape != [self.classes] {
            return Err(Error::Spec(format!("network output {shape:?} does not match {} classes", self.classes)));
        }
        Ok(out)
    }

    /// First weighted layer and the final classifier are full precision and
    /// every other convolution is binary.
    pub fn full_precision_ends(&self) -> bool {
        let weighted: Vec<&LayerKind> = self
            .layers
            .iter()
            .map(|l| &l.kind)
            .filter(|k| matches!(k, LayerKind::Conv(_) | LayerKind::BConv(..) | LayerKind::Linear { .. }))
            .collect();
        match (weighted.first(), weighted.last()) {
            (Some(LayerKind::Conv(_)), Some(LayerKind::Linear { .. })) if weighted.len() >= 2 => weighted[1..weighted.len() - 1]
                .iter()
                .all(|k| matches!(k, LayerKind::BConv(..))),
            _ => false,
        }
    }

    pub fn binary_layers(&self) -> impl Iterator<Item = (&str, &ConvGeometry, &BinaryPolicy)> {
        self.layers.iter().filter_map(|l| match &l.kind {
            LayerKind::BConv(g, p) => Some((l.name.as_str(), g, p)),
            _ => None,
        })
    }
}

/// Knobs shared by every preset.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PresetOptions {
    pub policy: BinaryPolicy,
    /// VGG-Small with its original widths instead of halved ones.
    pub full_width: bool,
    /// A shortcut around every binary convolution instead of every block.
    pub bireal_shortcuts: bool,
}

impl Default for PresetOptions {
    fn default() -> Self {
        PresetOptions {
            policy: BinaryPolicy { asd: AsdPolicy::Static(AsdForm::Sigmoid), wsd: true, scale: false, ste: SteKind::ClipSte },
            full_width: false,
            bireal_shortcuts: true,
        }
    }
}

pub const PRESETS: [&str; 5] = ["lenet", "vgg_small_lite", "resnet20", "pixel", "twoblock"];

struct Builder {
    layers: Vec<LayerSpec>,
    counter: BTreeMap<&'static str, usize>,
}

impl Builder {
    fn new() -> Self {
        Builder { layers: Vec::new(), counter: BTreeMap::new() }
    }

    fn push(&mut self, prefix: &'static str, kind: LayerKind) -> String {
        let n = self.counter.entry(prefix).or_insert(0);
        *n += 1;
        let name = format!("{prefix}{n}");
        self.layers.push(LayerSpec { name: name.clone(), kind });
        name
    }

    fn conv(&mut self, cin: usize, cout: usize, k: usize, s: usize, p: usize) {
        self.push("conv", LayerKind::Conv(ConvGeometry::new(cin, cout, k).stride(s).padding(p)));
        self.push("bn", LayerKind::Bn { channels: cout });
    }

    fn bconv(&mut self, cin: usize, cout: usize, s: usize, policy: BinaryPolicy) {
        self.push("bconv", LayerKind::BConv(ConvGeometry::new(cin, cout, 3).stride(s).padding(1), policy));
        self.push("bn", LayerKind::Bn { channels: cout });
    }

    fn act(&mut self) {
        self.push("act", LayerKind::Act(Activation::Hardtanh));
    }

    fn pool(&mut self) {
        self.push("pool", LayerKind::MaxPool { kernel: 2, stride: 2 });
    }

    fn save(&mut self) -> String {
        self.push("save", LayerKind::Save)
    }

    fn add(&mut self, from: String, stride: usize, out_channels: usize) {
        self.push("add", LayerKind::Add { from, stride, out_channels });
    }
}

impl ModelSpec {
    pub fn preset(name: &str, opts: &PresetOptions) -> Result<ModelSpec> {
        let p = opts.policy;
        let mut b = Builder::new();
        let (input, notes) = match name {
            "lenet" => {
                b.conv(1, 16, 3, 1, 1);
                b.act();
                b.pool();
                b.bconv(16, 32, 1, p);
                b.pool();
                b.act();
                b.bconv(32, 32, 1, p);
                b.act();
                b.push("flatten", LayerKind::Flatten);
                b.push("fc", LayerKind::Linear { in_features: 32 * 7 * 7, out_features: 10, bias: true });
                ([1, 28, 28], vec!["binary block: shift and sign, binary conv, bn, pool, hardtanh".to_string()])
            }
            "vgg_small_lite" => {
                let k = if opts.full_width { 2 } else { 1 };
                let widths = [64 * k, 64 * k, 128 * k, 128 * k, 256 * k, 256 * k];
                b.conv(3, widths[0], 3, 1, 1);
                b.act();
                for i in 1..6 {
                    b.bconv(widths[i - 1], widths[i], 1, p);
                    if i % 2 == 1 {
                        b.pool();
                    }
                    b.act();
                }
                let feat = widths[5] * 4 * 4;
                b.push("flatten", LayerKind::Flatten);
                b.push("fc", LayerKind::Linear { in_features: feat, out_features: 10, bias: true });
                let width = if opts.full_width { "full" } else { "halved" };
                ([3, 32, 32], vec![
                    format!("vgg-small with {width} widths"),
                    "block order: shift and sign, binary conv, bn, optional maxpool, hardtanh".to_string(),
                ])
            }
            "resnet20" => {
                b.conv(3, 16, 3, 1, 1);
                b.act();
                let mut cin = 16;
                for (stage, width) in [16, 32, 64].into_iter().enumerate() {
                    for block in 0..3 {
                        let stride = if stage > 0 && block == 0 { 2 } else { 1 };
                        if opts.bireal_shortcuts {
                            let s = b.save();
                            b.bconv(cin, width, stride, p);
                            b.add(s, stride, width);
                            b.act();
                            let s = b.save();
                            b.bconv(width, width, 1, p);
                            b.add(s, 1, width);
                            b.act();
                        } else {
                            let s = b.save();
                            b.bconv(cin, width, stride, p);
                            b.act();
                            b.bconv(width, width, 1, p);
                            b.add(s, stride, width);
                            b.act();
                        }
                        cin = width;
                    }
                }
                b.push("gap", LayerKind::Gap);
                b.push("fc", LayerKind::Linear { in_features: 64, out_features: 10, bias: true });
                let sc = if opts.bireal_shortcuts { "around every binary conv" } else { "around every block" };
                ([3, 32, 32], vec![
                    format!("resnet-20, shortcuts {sc}, option-A downsampling"),
                    "block order: shift and sign, binary conv, bn, shortcut add, hardtanh".to_string(),
                ])
            }
            "pixel" => {
                b.push("bconv", LayerKind::BConv(ConvGeometry::new(1, 2, 1), p));
                b.push("bn", LayerKind::Bn { channels: 2 });
                b.push("flatten", LayerKind::Flatten);
                ([1, 1, 1], vec!["single pixel, one input channel, two output channels".to_string()])
            }
            "twoblock" => {
                b.conv(3, 8, 3, 1, 1);
                b.bconv(8, 8, 1, p);
                let dynamic = match p.asd {
                    AsdPolicy::Dynamic { .. } => p,
                    _ => BinaryPolicy { asd: AsdPolicy::Dynamic { re: 4 }, ..p },
                };
                b.bconv(8, 8, 2, dynamic);
                b.push("gap", LayerKind::Gap);
                b.push("fc", LayerKind::Linear { in_features: 8, out_features: 10, bias: true });
                ([3, 8, 8], vec![
                    "two binary blocks without kinks outside sign, for gradient checks".to_string(),
                    "the second block always shifts activations dynamically".to_string(),
                ])
            }
            other => {
                return Err(Error::Spec(format!("unknown preset {other:?} (expected one of {})", PRESETS.join(", "))))
            }
        };
        let classes = if name == "pixel" { 2 } else { 10 };
        let spec = ModelSpec { name: name.to_string(), input, classes, notes, layers: b.layers };
        spec.validate()?;
        Ok(spec)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_round_trip_through_text() {
        for name in PRESETS {
            for bireal in [false, true] {
                let opts = PresetOptions { bireal_shortcuts: bireal, ..Default::default() };
                let spec = ModelSpec::preset(name, &opts).unwrap();
                assert_eq!(ModelSpec::parse(&spec.to_text()).unwrap(), spec);
            }
        }
    }

    #[test]
    fn paper_presets_keep_ends_full_precision() {
        for name in ["lenet", "vgg_small_lite", "resnet20"] {
            assert!(ModelSpec::preset(name, &PresetOptions::default()).unwrap().full_precision_ends(), "{name}");
        }
        assert!(!ModelSpec::preset("pixel", &PresetOptions::default()).unwrap().full_precision_ends());
    }

    #[test]
    fn resnet20_stage_widths() {
        for bireal in [false, true] {
            let opts = PresetOptions { bireal_shortcuts: bireal, ..Default::default() };
            let spec = ModelSpec::preset("resnet20", &opts).unwrap();
            let shapes = spec.validate().unwrap();
            let widths: Vec<usize> = spec
                .layers
                .iter()
                .zip(&shapes)
                .filter(|(l, _)| matches!(l.kind, LayerKind::BConv(..)))
                .map(|(_, s)| s[0])
                .collect();
            assert_eq!(widths.len(), 18);
            assert_eq!(&widths[..6], &[16; 6]);
            assert_eq!(&widths[6..12], &[32; 6]);
            assert_eq!(&widths[12..], &[64; 6]);
            assert_eq!(shapes.last().unwrap(), &vec![10]);
            let gap_in = &shapes[shapes.len() - 3];
            assert_eq!(gap_in, &vec![64, 8, 8]);
        }
    }

    #[test]
    fn vgg_widths_follow_flag() {
        let half = ModelSpec::preset("vgg_small_lite", &PresetOptions::default()).unwrap();
        let full = ModelSpec::preset("vgg_small_lite", &PresetOptions { full_width: true, ..Default::default() }).unwrap();
        let widest = |s: &ModelSpec| s.binary_layers().map(|(_, g, _)| g.out_channels).max().unwrap();
        assert_eq!((widest(&half), widest(&full)), (256, 512));
    }

    #[test]
    fn structural_errors_are_reported() {
        let spec = ModelSpec::preset("lenet", &PresetOptions::default()).unwrap();
        let text = spec.to_text();

        let no_bn = text.replace("bn name=bn2 c=32\n", "");
        assert!(ModelSpec::parse(&no_bn).unwrap_err().to_string().contains("followed by bn"));

        let bad_key = text.replace("bn name=bn1 c=16", "bn name=bn1 c=16 colour=red");
        assert!(ModelSpec::parse(&bad_key).unwrap_err().to_string().contains("unknown key"));

        let res = ModelSpec::preset("resnet20", &PresetOptions::default()).unwrap().to_text();
        let forward_ref = res.replacen("from=save1", "from=save9", 1);
        assert!(ModelSpec::parse(&forward_ref).unwrap_err().to_string().contains("acyclic"));
        let wrong_width = res.replacen("from=save1 s=1 out=16", "from=save1 s=1 out=32", 1);
        assert!(ModelSpec::parse(&wrong_width).is_err());
        assert!(ModelSpec::preset("resnet18", &PresetOptions::default()).is_err());
    }

    #[test]
    fn policy_strings() {
        assert_eq!("dasd:16".parse::<AsdPolicy>().unwrap(), AsdPolicy::Dynamic { re: 16 });
        assert_eq!("tanh".parse::<AsdPolicy>().unwrap(), AsdPolicy::Static(AsdForm::Tanh));
        assert!("dasd:0".parse::<AsdPolicy>().is_err());
        for p in ["off", "original", "sigmoid", "dasd:8"] {
            assert_eq!(p.parse::<AsdPolicy>().unwrap().to_string(), p);
        }
    }
}
