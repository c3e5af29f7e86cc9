//! Self-distribution factors and the scaling-factor baseline.
//!
//! Every shift here has two implementations: a plain tensor function used by
//! inference and a graph builder used by training. They perform the same
//! floating-point operations in the same order, so a trained network gives
//! bit-identical activations on both paths.

mod stats;

use std::fmt;
use std::str::FromStr;

use rand::Rng;

pub use stats::SignStats;

use crate::autograd::{sign_value, Graph, NodeId};
use crate::bitkernel::bitconv2d_signs;
use crate::error::{Error, Result};
use crate::tensor::{global_avg_pool, linear, sigmoid_scalar, ConvGeometry, Real, Tensor};

/// Constraint applied to the raw activation factor.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum AsdForm {
    /// `beta = raw`, unconstrained.
    Original,
    /// `beta = tanh(raw)`, in `[-1, 1]`.
    Tanh,
    /// `beta = sigmoid(raw)`, in `[0, 1]`.
    #[default]
    Sigmoid,
}

impl AsdForm {
    pub fn as_str(self) -> &'static str {
        match self {
            AsdForm::Original => "original",
            AsdForm::Tanh => "tanh",
            AsdForm::Sigmoid => "sigmoid",
        }
    }

    #[inline]
    pub fn effective<T: Real>(self, raw: T) -> T {
        match self {
            AsdForm::Original => raw,
            AsdForm::Tanh => raw.tanh(),
            AsdForm::Sigmoid => sigmoid_scalar(raw),
        }
    }
}

impl fmt::Display for AsdForm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AsdForm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "original" => Ok(AsdForm::Original),
            "tanh" => Ok(AsdForm::Tanh),
            "sigmoid" => Ok(AsdForm::Sigmoid),
            other => Err(Error::Config(format!("unknown ASD form {other:?} (original|tanh|sigmoid)"))),
        }
    }
}

/// Adds `shift[(i / inner) % len]` to every element.
fn add_shift<T: Real>(x: &Tensor<T>, shift: &Tensor<T>, inner: usize) -> Tensor<T> {
    let l = shift.len();
    let mut out = x.clone();
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        *v += shift.data()[(i / inner) % l];
    }
    out
}

/// Static per-channel activation factor.
#[derive(Clone, Debug, PartialEq)]
pub struct AsdFactor<T: Real = f32> {
    pub raw: Tensor<T>,
    pub form: AsdForm,
}

impl<T: Real> AsdFactor<T> {
    /// Raw values start at zero.
    pub fn new(channels: usize, form: AsdForm) -> Self {
        AsdFactor { raw: Tensor::zeros([channels]), form }
    }

    pub fn channels(&self) -> usize {
        self.raw.len()
    }

    pub fn effective(&self) -> Tensor<T> {
        let form = self.form;
        self.raw.map(|r| form.effective(r))
    }

    /// `A_r + beta` broadcast over `N, H, W`.
    pub fn shift(&self, a_r: &Tensor<T>) -> Result<Tensor<T>> {
        let [_, c, h, w] = a_r.dims4()?;
        if c != self.channels() {
            return Err(Error::shape(format!("ASD factor has {} channels, input has {c}", self.channels())));
        }
        Ok(add_shift(a_r, &self.effective(), h * w))
    }

    /// Returns the shifted activations and their signs.
    pub fn apply(&self, a_r: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        let shifted = self.shift(a_r)?;
        let signs = shifted.map(sign_value);
        Ok((shifted, signs))
    }
}

pub fn dasd_hidden(channels: usize, re: usize) -> usize {
    channels.div_ceil(re.max(1)).max(1)
}

/// Input-dependent activation factor: global average pool, two linear
/// layers with a ReLU between them and a final sigmoid.
#[derive(Clone, Debug, PartialEq)]
pub struct DasdHead<T: Real = f32> {
    pub re: usize,
    pub w1: Tensor<T>,
    pub b1: Tensor<T>,
    pub w2: Tensor<T>,
    pub b2: Tensor<T>,
}

impl<T: Real> DasdHead<T> {
    /// Weights uniform in `±1/sqrt(fan_in)`, biases zero.
    pub fn new<R: Rng + ?Sized>(channels: usize, re: usize, rng: &mut R) -> Result<Self> {
        if re == 0 || channels == 0 {
            return Err(Error::Config(format!("DASD head needs re >= 1 and channels >= 1 (re={re}, C={channels})")));
        }
        let h = dasd_hidden(channels, re);
        let b1 = 1.0 / (channels as f64).sqrt();
        let b2 = 1.0 / (h as f64).sqrt();
        Ok(DasdHead {
            re,
            w1: Tensor::rand_uniform([h, channels], -b1, b1, rng),
            b1: Tensor::zeros([h]),
            w2: Tensor::rand_uniform([channels, h], -b2, b2, rng),
            b2: Tensor::zeros([channels]),
        })
    }

    pub fn zeros(channels: usize, re: usize) -> Self {
        let h = dasd_hidden(channels, re);
        DasdHead {
            re,
            w1: Tensor::zeros([h, channels]),
            b1: Tensor::zeros([h]),
            w2: Tensor::zeros([channels, h]),
            b2: Tensor::zeros([channels]),
        }
    }

    pub fn channels(&self) -> usize {
        self.b2.len()
    }

    pub fn hidden(&self) -> usize {
        self.b1.len()
    }

    /// `2 C ceil(C/re) + ceil(C/re) + C`.
    pub fn param_count(&self) -> usize {
        self.w1.len() + self.b1.len() + self.w2.len() + self.b2.len()
    }

    /// Per-sample factors `[N, C]`, each in `(0, 1)`.
    pub fn beta(&self, a_r: &Tensor<T>) -> Result<Tensor<T>> {
        let [_, c, ..] = a_r.dims4()?;
        if c != self.channels() {
            return Err(Error::shape(format!("DASD head has {} channels, input has {c}", self.channels())));
        }
        let pooled = global_avg_pool(a_r)?;
        let hidden = linear(&pooled, &self.w1, Some(&self.b1))?.map(|v| v.max(T::zero()));
        Ok(linear(&hidden, &self.w2, Some(&self.b2))?.map(sigmoid_scalar))
    }

    pub fn shift(&self, a_r: &Tensor<T>) -> Result<Tensor<T>> {
        let [_, _, h, w] = a_r.dims4()?;
        let beta = self.beta(a_r)?;
        Ok(add_shift(a_r, &beta, h * w))
    }

    pub fn apply(&self, a_r: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        let shifted = self.shift(a_r)?;
        let signs = shifted.map(sign_value);
        Ok((shifted, signs))
    }
}

/// Mean of every contiguous row of `row_len` values, as `sum * (1/row_len)`.
pub fn row_means<T: Real>(x: &Tensor<T>, row_len: usize) -> Vec<T> {
    let inv = T::from_f64(1.0 / row_len as f64);
    x.data().chunks(row_len).map(|r| r.iter().copied().sum::<T>() * inv).collect()
}

/// Per-output-channel weight factor, benchmarked against the channel mean.
#[derive(Clone, Debug, PartialEq)]
pub struct WsdFactor<T: Real = f32> {
    pub raw: Tensor<T>,
}

impl<T: Real> WsdFactor<T> {
    pub fn new(out_channels: usize) -> Self {
        WsdFactor { raw: Tensor::zeros([out_channels]) }
    }

    fn check(&self, w_r: &Tensor<T>) -> Result<usize> {
        let cout = w_r.shape().first().copied().unwrap_or(0);
        if cout != self.raw.len() || cout == 0 {
            return Err(Error::shape(format!(
                "WSD factor has {} output channels, weights have shape {:?}",
                self.raw.len(),
                w_r.shape()
            )));
        }
        Ok(w_r.len() / cout)
    }

    /// `sigmoid(raw[c]) * mean(w_r[c])` for each output channel.
    pub fn shift(&self, w_r: &Tensor<T>) -> Result<Tensor<T>> {
        let fan_in = self.check(w_r)?;
        let means = row_means(w_r, fan_in);
        let data = self.raw.data().iter().zip(&means).map(|(&a, &m)| sigmoid_scalar(a) * m).collect();
        Tensor::new([means.len()], data)
    }

    /// Shifted latent weights; `w_r` itself is never modified.
    pub fn shifted(&self, w_r: &Tensor<T>) -> Result<Tensor<T>> {
        let fan_in = self.check(w_r)?;
        Ok(add_shift(w_r, &self.shift(w_r)?, fan_in))
    }

    pub fn apply(&self, w_r: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        let shifted = self.shifted(w_r)?;
        let signs = shifted.map(sign_value);
        Ok((shifted, signs))
    }
}

/// Adds an arbitrary per-output-channel shift to a weight tensor.
pub fn shift_weights<T: Real>(w_r: &Tensor<T>, shift: &Tensor<T>) -> Result<Tensor<T>> {
    let cout = w_r.shape().first().copied().unwrap_or(0);
    if cout == 0 || shift.len() != cout {
        return Err(Error::shape(format!("{} shifts for weights {:?}", shift.len(), w_r.shape())));
    }
    Ok(add_shift(w_r, shift, w_r.len() / cout))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScalingMode {
    /// Mean absolute values of the real tensors.
    Analytic,
    /// Caller-supplied values.
    Learned,
}

/// Multiplicative factors of the XNOR-Net style baseline.
///
/// `alpha_s` has one entry per output channel and `beta_s` one per
/// `(sample, input channel)`. An output channel has no input channel of its
/// own, so the activation factor applied to sample `n` is the mean of
/// `beta_s[n, :]`, which for the analytic mode is the mean absolute
/// activation of that sample.
#[derive(Clone, Debug, PartialEq)]
pub struct ScalingFactors<T: Real = f32> {
    pub alpha_s: Tensor<T>,
    pub beta_s: Tensor<T>,
    pub mode: ScalingMode,
}

impl<T: Real> ScalingFactors<T> {
    pub fn analytic(w_r: &Tensor<T>, a_r: &Tensor<T>) -> Result<Self> {
        let [cout, ..] = w_r.dims4()?;
        let [n, c, h, w] = a_r.dims4()?;
        let abs_w = w_r.map(T::abs);
        let alpha = row_means(&abs_w, w_r.len() / cout);
        let beta = row_means(&a_r.map(T::abs), h * w);
        Ok(ScalingFactors {
            alpha_s: Tensor::new([cout], alpha)?,
            beta_s: Tensor::new([n, c], beta)?,
            mode: ScalingMode::Analytic,
        })
    }

    pub fn learned(alpha_s: Tensor<T>, beta_s: Tensor<T>) -> Result<Self> {
        beta_s.dims2()?;
        if alpha_s.shape().len() != 1 {
            return Err(Error::shape(format!("alpha_s must be [Cout], got {:?}", alpha_s.shape())));
        }
        Ok(ScalingFactors { alpha_s, beta_s, mode: ScalingMode::Learned })
    }

    /// Activation factor per sample (`beta_s` with one row applies to all).
    pub fn sample_factors(&self, batch: usize) -> Result<Vec<T>> {
        let [rows, c] = self.beta_s.dims2()?;
        let means = row_means(&self.beta_s, c);
        match rows {
            r if r == batch => Ok(means),
            1 => Ok(vec![means[0]; batch]),
            r => Err(Error::shape(format!("beta_s has {r} rows for a batch of {batch}"))),
        }
    }
}

/// `alpha_s[co] * beta_s[n] * (sign(w_r) ⊛ sign(A_r))` with `+1` padding.
pub fn scale_binarize_baseline<T: Real>(
    w_r: &Tensor<T>,
    a_r: &Tensor<T>,
    factors: &ScalingFactors<T>,
    geom: &ConvGeometry,
) -> Result<Tensor<T>> {
    let [n, ..] = a_r.dims4()?;
    factors.alpha_s.expect_shape(&[geom.out_channels])?;
    let beta = factors.sample_factors(n)?;
    let out = bitconv2d_signs(a_r, w_r, geom)?;
    Ok(apply_scaling(&out, factors.alpha_s.data(), &beta))
}

/// `(z * alpha[co]) * beta[n]` in that order.
pub fn apply_scaling<T: Real>(z: &Tensor<T>, alpha: &[T], beta: &[T]) -> Tensor<T> {
    let n = beta.len().max(1);
    let cout = alpha.len().max(1);
    let per_sample = z.len() / n;
    let pixels = per_sample / cout;
    let mut out = z.clone();
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        *v *= alpha[(i / pixels) % cout];
        *v *= beta[i / per_sample];
    }
    out
}

/// Analytic factors of a binary layer as used inside networks:
/// `alpha[co] = mean |w_r[co]|` and `beta[n] = mean_c mean_hw |A_r[n, c]|`.
pub fn analytic_scaling<T: Real>(w_r: &Tensor<T>, a_r: &Tensor<T>) -> Result<(Vec<T>, Vec<T>)> {
    Ok((weight_scale(w_r)?, activation_scale(a_r)?))
}

/// `mean |w_r[co]|` per output channel.
pub fn weight_scale<T: Real>(w_r: &Tensor<T>) -> Result<Vec<T>> {
    let [cout, ..] = w_r.dims4()?;
    Ok(row_means(&w_r.map(T::abs), w_r.len() / cout))
}

/// `mean_c mean_hw |A_r[n, c]|` per sample.
pub fn activation_scale<T: Real>(a_r: &Tensor<T>) -> Result<Vec<T>> {
    let [_, c, h, w] = a_r.dims4()?;
    let per_channel = Tensor::new([a_r.len() / (h * w)], row_means(&a_r.map(T::abs), h * w))?;
    Ok(row_means(&per_channel, c))
}

/// Graph counterparts of the shifts above. Each returns the shifted tensor;
/// callers apply `sign` themselves.
pub mod graph {
    use super::*;

    fn plane<T: Real>(g: &Graph<T>, x: NodeId) -> Result<usize> {
        let [_, _, h, w] = g.value(x).dims4()?;
        Ok(h * w)
    }

    pub fn asd_shift<T: Real>(g: &mut Graph<T>, x: NodeId, raw: NodeId, form: AsdForm) -> Result<NodeId> {
        let hw = plane(g, x)?;
        let c = g.value(x).shape()[1];
        if g.value(raw).len() != c {
            return Err(Error::shape(format!("ASD factor has {} channels, input has {c}", g.value(raw).len())));
        }
        let beta = match form {
            AsdForm::Original => raw,
            AsdForm::Tanh => g.tanh(raw),
            AsdForm::Sigmoid => g.sigmoid(raw),
        };
        g.add_broadcast(x, beta, hw)
    }

    /// Head parameters in the order `w1, b1, w2, b2`.
    pub fn dasd_shift<T: Real>(g: &mut Graph<T>, x: NodeId, head: [NodeId; 4]) -> Result<NodeId> {
        let hw = plane(g, x)?;
        let [w1, b1, w2, b2] = head;
        let pooled = g.global_avg_pool(x)?;
        let h = g.linear(pooled, w1, Some(b1))?;
        let h = g.relu(h);
        let o = g.linear(h, w2, Some(b2))?;
        let beta = g.sigmoid(o);
        g.add_broadcast(x, beta, hw)
    }

    pub fn wsd_shift<T: Real>(g: &mut Graph<T>, w: NodeId, raw: NodeId) -> Result<NodeId> {
        let wv = g.value(w);
        let cout = wv.shape().first().copied().unwrap_or(0);
        if cout == 0 || g.value(raw).len() != cout {
            return Err(Error::shape(format!("WSD factor has {} channels, weights {:?}", g.value(raw).len(), wv.shape())));
        }
        let fan_in = wv.len() / cout;
        let mean = g.row_mean(w, fan_in)?;
        let s = g.sigmoid(raw);
        let shift = g.mul(s, mean)?;
        g.add_broadcast(w, shift, fan_in)
    }

    /// Multiplies a binary conv output by the analytic baseline factors.
    pub fn analytic_scaling<T: Real>(g: &mut Graph<T>, z: NodeId, w_r: NodeId, a_r: NodeId) -> Result<NodeId> {
        let [cout, ..] = g.value(w_r).dims4()?;
        let fan_in = g.value(w_r).len() / cout;
        let [_, c, h, w] = g.value(a_r).dims4()?;
        let [_, zc, zh, zw] = g.value(z).dims4()?;
        if zc != cout {
            return Err(Error::shape(format!("conv output has {zc} channels, weights {cout}")));
        }
        let aw = g.abs(w_r);
        let alpha = g.row_mean(aw, fan_in)?;
        let aa = g.abs(a_r);
        let per_channel = g.row_mean(aa, h * w)?;
        let beta = g.row_mean(per_channel, c)?;
        let z = g.mul_broadcast(z, alpha, zh * zw)?;
        g.mul_broadcast(z, beta, zc * zh * zw)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::conv2d_ref;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t<const D: usize>(shape: [usize; D], v: &[f64]) -> Tensor<f64> {
        Tensor::new(shape, v.to_vec()).unwrap()
    }

    /// Output of the single-pixel setup: two output channels, one input.
    fn pixel_conv(a: &Tensor<f64>, w: &Tensor<f64>) -> Vec<f64> {
        bitconv2d_signs(a, w, &ConvGeometry::new(1, 2, 1)).unwrap().into_data()
    }

    #[test]
    fn single_pixel_sign_propagation() {
        let a_r = t([1, 1, 1, 1], &[1.0]);
        let w_r = t([2, 1, 1, 1], &[1.0, 1.0]);
        assert_eq!(pixel_conv(&a_r, &w_r), [1.0, 1.0]);

        let asd = AsdFactor { raw: t([1], &[-1.5]), form: AsdForm::Original };
        let (_, a_b) = asd.apply(&a_r).unwrap();
        assert_eq!(a_b.data(), &[-1.0]);
        assert_eq!(pixel_conv(&a_b, &w_r), [-1.0, -1.0]);

        let w_shifted = shift_weights(&w_r, &t([2], &[-1.5, 0.0])).unwrap();
        assert_eq!(pixel_conv(&a_r, &w_shifted), [-1.0, 1.0]);
    }

    #[test]
    fn sigmoid_factor_of_zero_raw_flips_small_negatives() {
        let f = AsdFactor::<f64>::new(1, AsdForm::Sigmoid);
        assert_eq!(f.effective().data(), &[0.5]);
        let (shifted, signs) = f.apply(&t([1, 1, 1, 1], &[-0.2])).unwrap();
        assert!((shifted.data()[0] - 0.3).abs() < 1e-12);
        assert_eq!(signs.data(), &[1.0]);
    }

    #[test]
    fn asd_rejects_channel_mismatch() {
        let f = AsdFactor::<f32>::new(3, AsdForm::Tanh);
        assert!(f.apply(&Tensor::zeros([1, 2, 2, 2])).is_err());
    }

    #[test]
    fn zero_head_reduces_to_static_half_shift() {
        let head = DasdHead::<f64>::zeros(5, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = Tensor::<f64>::randn([3, 5, 4, 4], 1.0, &mut rng);
        let beta = head.beta(&x).unwrap();
        assert!(beta.data().iter().all(|&b| b == 0.5));
        let asd = AsdFactor::<f64>::new(5, AsdForm::Sigmoid);
        assert_eq!(head.shift(&x).unwrap(), asd.shift(&x).unwrap());
    }

    #[test]
    fn dasd_factors_differ_between_samples() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let head = DasdHead::<f64>::new(8, 2, &mut rng).unwrap();
        let x = Tensor::<f64>::randn([2, 8, 3, 3], 1.0, &mut rng);
        let beta = head.beta(&x).unwrap();
        assert_ne!(beta.data()[..8], beta.data()[8..]);
    }

    #[test]
    fn dasd_parameter_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for (c, re) in [(16, 16), (32, 16), (64, 8), (10, 3), (3, 16)] {
            let head = DasdHead::<f32>::new(c, re, &mut rng).unwrap();
            let h = c.div_ceil(re);
            assert_eq!(head.hidden(), h);
            assert_eq!(head.param_count(), c * h * 2 + h + c);
        }
        assert!(DasdHead::<f32>::new(4, 0, &mut rng).is_err());
    }

    #[test]
    fn wsd_worked_example() {
        let w = t([1, 2, 1, 1], &[1.0, -3.0]);
        let f = WsdFactor::<f64>::new(1);
        assert_eq!(f.shift(&w).unwrap().data(), &[-0.5]);
        let (shifted, signs) = f.apply(&w).unwrap();
        assert_eq!(shifted.data(), &[0.5, -3.5]);
        assert_eq!(signs.data(), &[1.0, -1.0]);
        assert_eq!(w.data(), &[1.0, -3.0]);
    }

    #[test]
    fn wsd_is_local_to_its_channel_and_inert_on_zero_mean() {
        let w = t([2, 2, 1, 1], &[0.5, -0.5, 0.2, 0.6]);
        let mut f = WsdFactor::<f64>::new(2);
        let before = f.shifted(&w).unwrap();
        f.raw.data_mut()[1] = 4.0;
        let after = f.shifted(&w).unwrap();
        assert_eq!(before.data()[..2], after.data()[..2]);
        assert_eq!(&before.data()[..2], &[0.5, -0.5]);
        assert_ne!(before.data()[2..], after.data()[2..]);
    }

    #[test]
    fn analytic_alpha_is_mean_abs() {
        let w = t([1, 2, 1, 1], &[1.0, -3.0]);
        let a = t([1, 2, 1, 1], &[0.5, -1.5]);
        let s = ScalingFactors::analytic(&w, &a).unwrap();
        assert_eq!(s.alpha_s.data(), &[2.0]);
        assert_eq!(s.beta_s.data(), &[0.5, 1.5]);
        assert_eq!(s.sample_factors(1).unwrap(), vec![1.0]);
        assert_eq!(s.mode, ScalingMode::Analytic);
    }

    #[test]
    fn unit_scaling_is_plain_binary_conv() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let g = ConvGeometry::new(3, 4, 3).padding(1);
        let a = Tensor::<f64>::randn([2, 3, 5, 5], 1.0, &mut rng);
        let w = Tensor::<f64>::randn([4, 3, 3, 3], 1.0, &mut rng);
        let f = ScalingFactors::learned(Tensor::ones([4]), Tensor::ones([1, 3])).unwrap();
        let got = scale_binarize_baseline(&w, &a, &f, &g).unwrap();
        let want = conv2d_ref(&a.map(sign_value), &w.map(sign_value), &g, 1.0).unwrap();
        assert_eq!(got, want);
    }

    #[test]
    fn graph_shifts_match_tensor_shifts_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Tensor::<f32>::randn([2, 6, 3, 3], 1.0, &mut rng);
        let w = Tensor::<f32>::randn([4, 6, 3, 3], 0.2, &mut rng);
        let head = DasdHead::<f32>::new(6, 2, &mut rng).unwrap();
        let asd = AsdFactor { raw: Tensor::randn([6], 1.0, &mut rng), form: AsdForm::Tanh };
        let wsd = WsdFactor { raw: Tensor::randn([4], 1.0, &mut rng) };

        let mut g = Graph::new();
        let xi = g.input(x.clone());
        let raw = g.input(asd.raw.clone());
        let a = graph::asd_shift(&mut g, xi, raw, asd.form).unwrap();
        assert_eq!(g.value(a), &asd.shift(&x).unwrap());

        let hp = [&head.w1, &head.b1, &head.w2, &head.b2].map(|p| g.input(p.clone()));
        let d = graph::dasd_shift(&mut g, xi, hp).unwrap();
        assert_eq!(g.value(d), &head.shift(&x).unwrap());

        let wi = g.input(w.clone());
        let wr = g.input(wsd.raw.clone());
        let ws = graph::wsd_shift(&mut g, wi, wr).unwrap();
        assert_eq!(g.value(ws), &wsd.shifted(&w).unwrap());

        let geom = ConvGeometry::new(6, 4, 3).padding(1);
        let z = bitconv2d_signs(&x, &w, &geom).unwrap();
        let zi = g.input(z.clone());
        let scaled = graph::analytic_scaling(&mut g, zi, wi, xi).unwrap();
        let (alpha, beta) = analytic_scaling(&w, &x).unwrap();
        assert_eq!(g.value(scaled), &apply_scaling(&z, &alpha, &beta));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn constrained_forms_stay_in_range(raw in proptest::collection::vec(-1e6f64..1e6, 1..32)) {
            let n = raw.len();
            let r = Tensor::new([n], raw).unwrap();
            let s = AsdFactor { raw: r.clone(), form: AsdForm::Sigmoid }.effective();
            prop_assert!(s.data().iter().all(|&b| (0.0..=1.0).contains(&b)));
            let th = AsdFactor { raw: r, form: AsdForm::Tanh }.effective();
            prop_assert!(th.data().iter().all(|&b| (-1.0..=1.0).contains(&b)));
        }

        #[test]
        fn nonnegative_shift_only_adds_positive_signs(
            vals in proptest::collection::vec(-2.0f64..2.0, 4),
            raw in proptest::collection::vec(-8.0f64..8.0, 2),
        ) {
            let x = Tensor::new([1, 2, 1, 2], vals).unwrap();
            let f = AsdFactor { raw: Tensor::new([2], raw).unwrap(), form: AsdForm::Sigmoid };
            let (_, signs) = f.apply(&x).unwrap();
            for (&s, &v) in signs.data().iter().zip(x.data()) {
                if v >= 0.0 {
                    prop_assert_eq!(s, 1.0);
                }
            }
        }

        #[test]
        fn wsd_shift_is_bounded_by_channel_mean(
            vals in proptest::collection::vec(-3.0f64..3.0, 12),
            raw in proptest::collection::vec(-1e3f64..1e3, 3),
        ) {
            let w = Tensor::new([3, 4, 1, 1], vals).unwrap();
            let f = WsdFactor { raw: Tensor::new([3], raw).unwrap() };
            let shift = f.shift(&w).unwrap();
            for (s, m) in shift.data().iter().zip(row_means(&w, 4)) {
                prop_assert!(s.abs() <= m.abs());
            }
        }
    }
}
