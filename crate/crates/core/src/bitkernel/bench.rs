//! Latency comparison of the binary convolution paths.
//!
//! Four ops are timed per case:
//!
//! * `conv2d_ref`: the naive float convolution (the oracle);
//! * `conv2d_gemm`: the im2col float convolution used for training, for context;
//! * `sd_bitconv`: additive shift, sign packing and XNOR/popcount convolution;
//! * `scaled_bitconv`: sign packing, XNOR/popcount convolution and the
//!   per-element `alpha_s * beta_s` rescaling of the scaling-factor baseline.
//!
//! Before anything is timed the packed result is compared with `conv2d_ref`
//! on the unpacked signs. A mismatch aborts the run.

use std::fmt::{self, Write as _};
use std::str::FromStr;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{bitconv2d, BitTensor, PackedConvPlan};
use crate::autograd::sign_value;
use crate::error::{Error, Result};
use crate::tensor::{conv2d, conv2d_ref, ConvGeometry, Tensor};

pub const MULTIPLY_FREE_NOTE: &str = "sd_bitconv applies its self-distribution shift before binarization and \
performs zero per-element floating multiplies after the convolution; scaled_bitconv multiplies every output \
by alpha_s*beta_s";

/// Elementwise float work done around a binary convolution.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct OpCounts {
    pub pre_conv_adds: u64,
    pub post_conv_muls: u64,
}

impl OpCounts {
    pub fn merge(&mut self, other: OpCounts) {
        self.pre_conv_adds += other.pre_conv_adds;
        self.post_conv_muls += other.post_conv_muls;
    }
}

/// `sign(x + beta[c]) ⊛ w_b` with the shift applied channel-wise.
pub fn sd_bitconv(
    x: &Tensor<f32>,
    beta: &[f32],
    weights: &BitTensor,
    plan: &PackedConvPlan,
    counts: &mut OpCounts,
) -> Result<Tensor<f32>> {
    let [_, c, h, w] = x.dims4()?;
    if beta.len() != c {
        return Err(Error::shape(format!("{} shift values for {c} channels", beta.len())));
    }
    let hw = h * w;
    let shifted = Tensor::from_fn(x.shape().to_vec(), |i| x.data()[i] + beta[(i / hw) % c]);
    counts.pre_conv_adds += x.len() as u64;
    bitconv2d(&BitTensor::pack(&shifted), weights, plan)
}

/// `alpha_s[co] * beta_s[n] * (sign(x) ⊛ w_b)` where `beta_s[n]` is the mean
/// absolute activation of sample `n`.
pub fn scaled_bitconv(
    x: &Tensor<f32>,
    alpha_s: &[f32],
    weights: &BitTensor,
    plan: &PackedConvPlan,
    counts: &mut OpCounts,
) -> Result<Tensor<f32>> {
    let [n, ..] = x.dims4()?;
    let cout = plan.geom.out_channels;
    if alpha_s.len() != cout {
        return Err(Error::shape(format!("{} weight scales for {cout} output channels", alpha_s.len())));
    }
    let per_sample = x.len() / n.max(1);
    let beta_s: Vec<f32> = x
        .data()
        .chunks(per_sample.max(1))
        .map(|s| s.iter().map(|v| v.abs()).sum::<f32>() / per_sample as f32)
        .collect();
    counts.pre_conv_adds += x.len() as u64;
    let mut out = bitconv2d::<f32>(&BitTensor::pack(x), weights, plan)?;
    let pixels = plan.out_h * plan.out_w;
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        let (b, co) = (i / (cout * pixels), (i / pixels) % cout);
        *v *= alpha_s[co] * beta_s[b];
    }
    counts.post_conv_muls += out.len() as u64;
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BenchCase {
    pub batch: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub size: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl BenchCase {
    /// The 64-channel 32x32 3x3 case used as the speed smoke test.
    pub fn smoke() -> Self {
        BenchCase { batch: 1, in_channels: 64, out_channels: 64, size: 32, kernel: 3, stride: 1, padding: 1 }
    }

    pub fn geometry(&self) -> ConvGeometry {
        ConvGeometry::new(self.in_channels, self.out_channels, self.kernel)
            .stride(self.stride)
            .padding(self.padding)
    }

    fn label(&self) -> String {
        format!(
            "{}x{}x{}x{}/{}k{}s{}p{}",
            self.batch, self.in_channels, self.size, self.size, self.out_channels, self.kernel, self.stride, self.padding
        )
    }
}

impl FromStr for BenchCase {
    type Err = Error;

    /// Parses `NxCxHxW/COUTkKsSpP`, e.g. `1x64x32x32/64k3s1p1`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("bench case {s:?} is not NxCxHxW/COUTkKsSpP"));
        let (input, rest) = s.split_once('/').ok_or_else(bad)?;
        let dims: Vec<usize> = input.split('x').map(|d| d.parse().map_err(|_| bad())).collect::<Result<_>>()?;
        let [batch, in_channels, h, w] = dims[..] else { return Err(bad()) };
        if h != w {
            return Err(Error::Config(format!("bench case {s:?}: only square inputs are supported")));
        }
        let (cout, rest) = rest.split_once('k').ok_or_else(bad)?;
        let (k, rest) = rest.split_once('s').ok_or_else(bad)?;
        let (stride, pad) = rest.split_once('p').ok_or_else(bad)?;
        let num = |t: &str| t.parse::<usize>().map_err(|_| bad());
        let case = BenchCase {
            batch,
            in_channels,
            out_channels: num(cout)?,
            size: h,
            kernel: num(k)?,
            stride: num(stride)?,
            padding: num(pad)?,
        };
        case.geometry().validate()?;
        Ok(case)
    }
}

impl fmt::Display for BenchCase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label())
    }
}

#[derive(Clone, Debug)]
pub struct BenchConfig {
    pub cases: Vec<BenchCase>,
    pub warmup: usize,
    pub repetitions: usize,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig { cases: vec![BenchCase::smoke()], warmup: 2, repetitions: 9, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Timing {
    pub op: String,
    pub median_us: f64,
    pub p95_us: f64,
    /// Counters of a single call.
    pub counts: OpCounts,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CaseReport {
    pub case: BenchCase,
    pub exact: bool,
    pub timings: Vec<Timing>,
}

impl CaseReport {
    pub fn timing(&self, op: &str) -> Option<&Timing> {
        self.timings.iter().find(|t| t.op == op)
    }

    /// Median latency of `conv2d_ref` over that of `sd_bitconv`.
    pub fn speedup_vs_ref(&self) -> f64 {
        match (self.timing("conv2d_ref"), self.timing("sd_bitconv")) {
            (Some(r), Some(b)) => r.median_us / b.median_us.max(1e-9),
            _ => f64::NAN,
        }
    }

    pub fn speedup_vs_scaled(&self) -> f64 {
        match (self.timing("scaled_bitconv"), self.timing("sd_bitconv")) {
            (Some(r), Some(b)) => r.median_us / b.median_us.max(1e-9),
            _ => f64::NAN,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct BenchReport {
    pub cases: Vec<CaseReport>,
    pub note: String,
}

fn percentile(sorted: &[f64], q: f64) -> f64 {
    let rank = ((q * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
    sorted[rank - 1]
}

fn time_op(warmup: usize, reps: usize, mut f: impl FnMut() -> Result<OpCounts>) -> Result<(f64, f64, OpCounts)> {
    let mut counts = OpCounts::default();
    for _ in 0..warmup {
        counts = f()?;
    }
    let mut samples = Vec::with_capacity(reps);
    for _ in 0..reps.max(1) {
        let t = Instant::now();
        counts = f()?;
        samples.push(t.elapsed().as_secs_f64() * 1e6);
    }
    samples.sort_by(f64::total_cmp);
    // Rounded to the report precision so a parsed report equals the original.
    let round = |v: f64| (v * 1e3).round() / 1e3;
    Ok((round(percentile(&samples, 0.5)), round(percentile(&samples, 0.95)), counts))
}

pub fn run(cfg: &BenchConfig) -> Result<BenchReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut report = BenchReport { cases: Vec::new(), note: MULTIPLY_FREE_NOTE.to_string() };
    for &case in &cfg.cases {
        let g = case.geometry();
        let x = Tensor::<f32>::randn([case.batch, case.in_channels, case.size, case.size], 1.0, &mut rng);
        let w = Tensor::<f32>::randn(g.weight_shape(), 0.1, &mut rng);
        let beta: Vec<f32> = Tensor::<f32>::rand_uniform([case.in_channels], 0.0, 1.0, &mut rng).into_data();
        let alpha_s: Vec<f32> = w
            .data()
            .chunks(g.fan_in())
            .map(|row| row.iter().map(|v| v.abs()).sum::<f32>() / g.fan_in() as f32)
            .collect();
        let plan = PackedConvPlan::new(g, case.size, case.size)?;
        let wb = BitTensor::pack(&w);

        // Gate: the shifted binary path must equal the float oracle on signs.
        let mut scratch = OpCounts::default();
        let got = sd_bitconv(&x, &beta, &wb, &plan, &mut scratch)?;
        let hw = case.size * case.size;
        let signs = Tensor::from_fn(x.shape().to_vec(), |i| {
            sign_value(x.data()[i] + beta[(i / hw) % case.in_channels])
        });
        let want = conv2d_ref(&signs, &w.map(sign_value), &g, 1.0)?;
        if got != want {
            return Err(Error::State(format!("bench case {case}: packed convolution disagrees with conv2d_ref")));
        }

        let (wu, reps) = (cfg.warmup, cfg.repetitions);
        let mut timings = Vec::new();
        let mut push = |op: &str, (median_us, p95_us, counts): (f64, f64, OpCounts)| {
            timings.push(Timing { op: op.to_string(), median_us, p95_us, counts })
        };
        push(
            "conv2d_ref",
            time_op(wu, reps, || conv2d_ref(&x, &w, &g, 0.0).map(|_| OpCounts::default()))?,
        );
        push(
            "conv2d_gemm",
            time_op(wu, reps, || conv2d(&x, &w, None, &g, 0.0).map(|_| OpCounts::default()))?,
        );
        push(
            "sd_bitconv",
            time_op(wu, reps, || {
                let mut c = OpCounts::default();
                sd_bitconv(&x, &beta, &wb, &plan, &mut c)?;
                Ok(c)
            })?,
        );
        push(
            "scaled_bitconv",
            time_op(wu, reps, || {
                let mut c = OpCounts::default();
                scaled_bitconv(&x, &alpha_s, &wb, &plan, &mut c)?;
                Ok(c)
            })?,
        );
        report.cases.push(CaseReport { case, exact: true, timings });
    }
    Ok(report)
}

impl BenchReport {
    /// Line-oriented `key=value` text. The note line carries free text after
    /// `note=`; every other line is whitespace-separated pairs.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for c in &self.cases {
            let _ = writeln!(
                s,
                "case={} exact={} speedup_vs_ref={:.3} speedup_vs_scaled={:.3}",
                c.case,
                c.exact,
                c.speedup_vs_ref(),
                c.speedup_vs_scaled()
            );
            for t in &c.timings {
                let _ = writeln!(
                    s,
                    "case={} op={} median_us={:.3} p95_us={:.3} pre_conv_adds={} post_conv_muls={}",
                    c.case, t.op, t.median_us, t.p95_us, t.counts.pre_conv_adds, t.counts.post_conv_muls
                );
            }
        }
        let _ = writeln!(s, "note={}", self.note);
        s
    }

    pub fn parse(text: &str) -> Result<BenchReport> {
        let mut report = BenchReport::default();
        for (lineno, line) in text.lines().enumerate() {
            let bad = |what: &str| Error::Format(format!("bench report line {}: {what}", lineno + 1));
            if line.trim().is_empty() {
                continue;
            }
            if let Some(note) = line.strip_prefix("note=") {
                report.note = note.to_string();
                continue;
            }
            let mut kv = std::collections::BTreeMap::new();
            for tok in line.split_whitespace() {
                let (k, v) = tok.split_once('=').ok_or_else(|| bad("expected key=value"))?;
                kv.insert(k, v);
            }
            let get = |k: &str| kv.get(k).copied().ok_or_else(|| bad(&format!("missing {k}")));
            let case: BenchCase = get("case")?.parse()?;
            let num = |k: &str| get(k)?.parse::<f64>().map_err(|_| bad(&format!("bad {k}")));
            let int = |k: &str| get(k)?.parse::<u64>().map_err(|_| bad(&format!("bad {k}")));
            if let Ok(op) = get("op") {
                let c = report
                    .cases
                    .iter_mut()
                    .rev()
                    .find(|c| c.case == case)
                    .ok_or_else(|| bad("timing before its case line"))?;
                c.timings.push(Timing {
                    op: op.to_string(),
                    median_us: num("median_us")?,
                    p95_us: num("p95_us")?,
                    counts: OpCounts { pre_conv_adds: int("pre_conv_adds")?, post_conv_muls: int("post_conv_muls")? },
                });
            } else {
                let exact = get("exact")?.parse::<bool>().map_err(|_| bad("bad exact"))?;
                report.cases.push(CaseReport { case, exact, timings: Vec::new() });
            }
        }
        Ok(report)
    }
}
