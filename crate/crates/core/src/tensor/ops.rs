use super::{gemm, MatRef, Real, Tensor};
use crate::error::{Error, Result};

/// `x * w^T + b` for `x: [N, F]`, `w: [G, F]`, `b: [G]`.
pub fn linear<T: Real>(x: &Tensor<T>, w: &Tensor<T>, bias: Option<&Tensor<T>>) -> Result<Tensor<T>> {
    let [n, f] = x.dims2()?;
    let [g, fw] = w.dims2()?;
    if f != fw {
        return Err(Error::shape(format!("linear: input has {f} features, weights expect {fw}")));
    }
    let mut out = Tensor::zeros([n, g]);
    gemm(MatRef::new(x.data(), n, f), MatRef::transposed(w.data(), f, g), out.data_mut(), false);
    if let Some(b) = bias {
        b.expect_shape(&[g])?;
        for row in out.data_mut().chunks_mut(g) {
            row.iter_mut().zip(b.data()).for_each(|(v, &bv)| *v += bv);
        }
    }
    out.debug_check_finite("linear", &[x, w, bias.unwrap_or(w)]);
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    Train,
    Eval,
}

/// Running statistics of a batch-norm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct BnState<T> {
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    pub momentum: T,
    pub eps: T,
}

impl<T: Real> BnState<T> {
    pub fn new(channels: usize) -> Self {
        BnState {
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
            momentum: T::from_f64(0.1),
            eps: T::from_f64(1e-5),
        }
    }

    pub fn channels(&self) -> usize {
        self.running_mean.len()
    }
}

/// Values saved by [`batchnorm2d`] for the backward pass.
#[derive(Clone, Debug)]
pub struct BatchNormCache<T> {
    pub normalized: Tensor<T>,
    pub inv_std: Vec<T>,
    pub mode: BnMode,
}

fn bn_layout<T: Real>(x: &Tensor<T>) -> Result<(usize, usize, usize)> {
    match x.shape()[..] {
        [n, c, h, w] => Ok((n, c, h * w)),
        [n, c] => Ok((n, c, 1)),
        _ => Err(Error::shape(format!("batchnorm expects 2-D or 4-D input, got {:?}", x.shape()))),
    }
}

/// Per-channel batch normalization over `N x H x W`. Train mode normalizes by
/// batch statistics and folds them into the running estimates; eval mode uses
/// the running estimates.
pub fn batchnorm2d<T: Real>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    state: &mut BnState<T>,
    mode: BnMode,
) -> Result<(Tensor<T>, BatchNormCache<T>)> {
    let (n, c, plane) = bn_layout(x)?;
    if gamma.len() != c || beta.len() != c || state.channels() != c {
        return Err(Error::shape(format!(
            "batchnorm has {} channels of parameters, input has {c}",
            gamma.len()
        )));
    }
    let count = n * plane;
    let data = x.data();
    let (mean, var): (Vec<T>, Vec<T>) = match mode {
        BnMode::Train => {
            if count == 0 {
                return Err(Error::shape("batchnorm in train mode needs a non-empty batch"));
            }
            let inv = T::from_f64(1.0 / count as f64);
            let mut mean = vec![T::zero(); c];
            let mut var = vec![T::zero(); c];
            for ch in 0..c {
                let mut s = T::zero();
                for b in 0..n {
                    s += data[(b * c + ch) * plane..(b * c + ch + 1) * plane].iter().copied().sum::<T>();
                }
                let m = s * inv;
                let mut sq = T::zero();
                for b in 0..n {
                    for &v in &data[(b * c + ch) * plane..(b * c + ch + 1) * plane] {
                        sq += (v - m) * (v - m);
                    }
                }
                mean[ch] = m;
                var[ch] = sq * inv;
            }
            let mom = state.momentum;
            let unbias = if count > 1 { T::from_f64(count as f64 / (count - 1) as f64) } else { T::one() };
            for ch in 0..c {
                state.running_mean[ch] = (T::one() - mom) * state.running_mean[ch] + mom * mean[ch];
                state.running_var[ch] = (T::one() - mom) * state.running_var[ch] + mom * var[ch] * unbias;
            }
            (mean, var)
        }
        BnMode::Eval => (state.running_mean.clone(), state.running_var.clone()),
    };
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + state.eps).sqrt()).collect();
    let mut normalized = Tensor::zeros(x.shape().to_vec());
    let mut out = Tensor::zeros(x.shape().to_vec());
    for b in 0..n {
        for ch in 0..c {
            let range = (b * c + ch) * plane..(b * c + ch + 1) * plane;
            let (m, is, g, bt) = (mean[ch], inv_std[ch], gamma.data()[ch], beta.data()[ch]);
            for i in range {
                let xh = (data[i] - m) * is;
                normalized.data_mut()[i] = xh;
                out.data_mut()[i] = g * xh + bt;
            }
        }
    }
    out.debug_check_finite("batchnorm2d", &[x, gamma, beta]);
    Ok((out, BatchNormCache { normalized, inv_std, mode }))
}

/// Returns gradients for input, gamma and beta.
pub fn batchnorm2d_backward<T: Real>(
    grad_out: &Tensor<T>,
    gamma: &Tensor<T>,
    cache: &BatchNormCache<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    grad_out.expect_shape(cache.normalized.shape())?;
    let (n, c, plane) = bn_layout(grad_out)?;
    let dy = grad_out.data();
    let xh = cache.normalized.data();
    let mut dgamma = Tensor::zeros([c]);
    let mut dbeta = Tensor::zeros([c]);
    for b in 0..n {
        for ch in 0..c {
            for i in (b * c + ch) * plane..(b * c + ch + 1) * plane {
                dgamma.data_mut()[ch] += dy[i] * xh[i];
                dbeta.data_mut()[ch] += dy[i];
            }
        }
    }
    let mut dx = Tensor::zeros(grad_out.shape().to_vec());
    let count = T::from_f64((n * plane) as f64);
    for ch in 0..c {
        let g = gamma.data()[ch] * cache.inv_std[ch];
        let (sum_dy, sum_dy_xh) = (dbeta.data()[ch], dgamma.data()[ch]);
        for b in 0..n {
            for i in (b * c + ch) * plane..(b * c + ch + 1) * plane {
                dx.data_mut()[i] = match cache.mode {
                    BnMode::Train => g * (dy[i] - sum_dy / count - xh[i] * sum_dy_xh / count),
                    BnMode::Eval => g * dy[i],
                };
            }
        }
    }
    Ok((dx, dgamma, dbeta))
}

/// Mean over `H x W` for every `(n, c)`.
pub fn global_avg_pool<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let [n, c, h, w] = x.dims4()?;
    if h == 0 || w == 0 {
        return Err(Error::shape("global_avg_pool needs H, W >= 1"));
    }
    let plane = h * w;
    let inv = T::from_f64(1.0 / plane as f64);
    let data = x.data().chunks(plane).map(|p| p.iter().copied().sum::<T>() * inv).collect();
    Tensor::new([n, c], data)
}

/// Max pooling with a square window; returns the output and, per output
/// element, the flat input index that won.
pub fn maxpool2d<T: Real>(x: &Tensor<T>, kernel: usize, stride: usize) -> Result<(Tensor<T>, Vec<usize>)> {
    let [n, c, h, w] = x.dims4()?;
    if kernel == 0 || stride == 0 || h < kernel || w < kernel {
        return Err(Error::shape(format!("maxpool {kernel}/{stride} on {h}x{w}")));
    }
    let oh = (h - kernel) / stride + 1;
    let ow = (w - kernel) / stride + 1;
    let mut out = Tensor::zeros([n, c, oh, ow]);
    let mut arg = vec![0usize; n * c * oh * ow];
    let data = x.data();
    let mut o = 0;
    for plane in 0..n * c {
        let base = plane * h * w;
        for y in 0..oh {
            for xo in 0..ow {
                let mut best = base + y * stride * w + xo * stride;
                for ky in 0..kernel {
                    for kx in 0..kernel {
                        let i = base + (y * stride + ky) * w + xo * stride + kx;
                        if data[i] > data[best] {
                            best = i;
                        }
                    }
                }
                out.data_mut()[o] = data[best];
                arg[o] = best;
                o += 1;
            }
        }
    }
    Ok((out, arg))
}

pub fn sigmoid_scalar<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub fn relu<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| v.max(T::zero()))
}

pub fn hardtanh<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| v.max(-T::one()).min(T::one()))
}

pub fn sigmoid<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    x.map(sigmoid_scalar)
}

pub fn tanh<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    x.map(T::tanh)
}

/// Mean softmax cross-entropy over the batch and its gradient w.r.t. logits.
pub fn softmax_cross_entropy<T: Real>(logits: &Tensor<T>, labels: &[usize]) -> Result<(T, Tensor<T>)> {
    let [n, classes] = logits.dims2()?;
    if labels.len() != n {
        return Err(Error::shape(format!("{} labels for {n} rows of logits", labels.len())));
    }
    if n == 0 {
        return Err(Error::shape("softmax_cross_entropy on an empty batch"));
    }
    let inv_n = T::from_f64(1.0 / n as f64);
    let mut grad = Tensor::zeros([n, classes]);
    let mut loss = T::zero();
    for (row, (&label, g)) in logits.data().chunks(classes).zip(labels.iter().zip(grad.data_mut().chunks_mut(classes))) {
        if label >= classes {
            return Err(Error::Label { label, classes });
        }
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let sum: T = row.iter().map(|&v| (v - max).exp()).sum();
        let log_z = max + sum.ln();
        loss += log_z - row[label];
        for (gv, &v) in g.iter_mut().zip(row) {
            *gv = (v - log_z).exp() * inv_n;
        }
        g[label] -= inv_n;
    }
    Ok((loss * inv_n, grad))
}
