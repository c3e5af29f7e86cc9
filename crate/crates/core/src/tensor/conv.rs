use super::{gemm, MatRef, Real, Tensor};
use crate::error::{Error, Result};

/// Square-kernel 2-D convolution geometry with symmetric padding.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub has_bias: bool,
}

impl ConvGeometry {
    pub fn new(in_channels: usize, out_channels: usize, kernel: usize) -> Self {
        ConvGeometry { in_channels, out_channels, kernel, stride: 1, padding: 0, has_bias: false }
    }

    pub fn stride(mut self, stride: usize) -> Self {
        self.stride = stride;
        self
    }

    pub fn padding(mut self, padding: usize) -> Self {
        self.padding = padding;
        self
    }

    pub fn with_bias(mut self, has_bias: bool) -> Self {
        self.has_bias = has_bias;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.stride < 1 || self.kernel < 1 || self.in_channels < 1 || self.out_channels < 1 {
            return Err(Error::shape(format!("invalid conv geometry {self:?}")));
        }
        Ok(())
    }

    /// Number of weights feeding one output value, `Cin * K * K`.
    pub fn fan_in(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        [self.out_channels, self.in_channels, self.kernel, self.kernel]
    }

    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let ph = h + 2 * self.padding;
        let pw = w + 2 * self.padding;
        if ph < self.kernel || pw < self.kernel {
            return Err(Error::shape(format!(
                "input {h}x{w} with padding {} smaller than kernel {}",
                self.padding, self.kernel
            )));
        }
        Ok(((ph - self.kernel) / self.stride + 1, (pw - self.kernel) / self.stride + 1))
    }

    /// Checks input and weight shapes, returning `[N, Cin, H, W]` and the output size.
    pub fn check<T: Real>(
        &self,
        input: &Tensor<T>,
        weights: &Tensor<T>,
    ) -> Result<([usize; 4], (usize, usize))> {
        self.validate()?;
        let dims = input.dims4()?;
        if dims[1] != self.in_channels {
            return Err(Error::shape(format!(
                "conv expects {} input channels, input has {}",
                self.in_channels, dims[1]
            )));
        }
        weights.expect_shape(&self.weight_shape())?;
        let out = self.output_hw(dims[2], dims[3])?;
        Ok((dims, out))
    }
}

/// Direct cross-correlation by nested loops. Slow on purpose: this is the
/// oracle every faster convolution is checked against.
pub fn conv2d_ref<T: Real>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    geom: &ConvGeometry,
    pad_value: T,
) -> Result<Tensor<T>> {
    let ([n, cin, h, w], (oh, ow)) = geom.check(input, weights)?;
    let (k, s, p) = (geom.kernel, geom.stride, geom.padding as isize);
    let cout = geom.out_channels;
    let x = input.data();
    let wt = weights.data();
    let mut out = Tensor::zeros([n, cout, oh, ow]);
    let o = out.data_mut();
    for b in 0..n {
        for co in 0..cout {
            for y in 0..oh {
                for xo in 0..ow {
                    let mut acc = T::zero();
                    for ci in 0..cin {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (y * s + ky) as isize - p;
                                let ix = (xo * s + kx) as isize - p;
                                let v = if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    pad_value
                                } else {
                                    x[((b * cin + ci) * h + iy as usize) * w + ix as usize]
                                };
                                acc += v * wt[((co * cin + ci) * k + ky) * k + kx];
                            }
                        }
                    }
                    o[((b * cout + co) * oh + y) * ow + xo] = acc;
                }
            }
        }
    }
    out.debug_check_finite("conv2d_ref", &[input, weights]);
    Ok(out)
}

/// Unfolds one `[C, H, W]` sample into a `[C*K*K, OH*OW]` column matrix.
pub fn im2col<T: Real>(
    sample: &[T],
    c: usize,
    h: usize,
    w: usize,
    geom: &ConvGeometry,
    pad_value: T,
    cols: &mut [T],
) {
    let (k, s, p) = (geom.kernel, geom.stride, geom.padding as isize);
    let oh = (h + 2 * geom.padding - k) / s + 1;
    let ow = (w + 2 * geom.padding - k) / s + 1;
    let plane = oh * ow;
    for ci in 0..c {
        let src = &sample[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for y in 0..oh {
                    let iy = (y * s + ky) as isize - p;
                    let line = &mut dst[y * ow..(y + 1) * ow];
                    if iy < 0 || iy >= h as isize {
                        line.iter_mut().for_each(|v| *v = pad_value);
                        continue;
                    }
                    let src_row = &src[iy as usize * w..(iy as usize + 1) * w];
                    for (xo, v) in line.iter_mut().enumerate() {
                        let ix = (xo * s + kx) as isize - p;
                        *v = if ix < 0 || ix >= w as isize { pad_value } else { src_row[ix as usize] };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters column gradients back onto the sample,
/// dropping contributions that land in the padding.
pub fn col2im<T: Real>(
    cols: &[T],
    c: usize,
    h: usize,
    w: usize,
    geom: &ConvGeometry,
    sample_grad: &mut [T],
) {
    let (k, s, p) = (geom.kernel, geom.stride, geom.padding as isize);
    let oh = (h + 2 * geom.padding - k) / s + 1;
    let ow = (w + 2 * geom.padding - k) / s + 1;
    let plane = oh * ow;
    for ci in 0..c {
        let dst = &mut sample_grad[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &cols[row * plane..(row + 1) * plane];
                for y in 0..oh {
                    let iy = (y * s + ky) as isize - p;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for xo in 0..ow {
                        let ix = (xo * s + kx) as isize - p;
                        if ix >= 0 && ix < w as isize {
                            dst[iy as usize * w + ix as usize] += src[y * ow + xo];
                        }
                    }
                }
            }
        }
    }
}

/// Convolution via im2col and GEMM; the path used by training and by the
/// full-precision layers at inference.
pub fn conv2d<T: Real>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    geom: &ConvGeometry,
    pad_value: T,
) -> Result<Tensor<T>> {
    let ([n, cin, h, w], (oh, ow)) = geom.check(input, weights)?;
    let cout = geom.out_channels;
    if let Some(b) = bias {
        b.expect_shape(&[cout])?;
    }
    let fan = geom.fan_in();
    let plane = oh * ow;
    let mut cols = vec![T::zero(); fan * plane];
    let mut out = Tensor::zeros([n, cout, oh, ow]);
    let x = input.data();
    for b in 0..n {
        im2col(&x[b * cin * h * w..(b + 1) * cin * h * w], cin, h, w, geom, pad_value, &mut cols);
        let dst = &mut out.data_mut()[b * cout * plane..(b + 1) * cout * plane];
        gemm(MatRef::new(weights.data(), cout, fan), MatRef::new(&cols, fan, plane), dst, false);
        if let Some(bias) = bias {
            for (co, row) in dst.chunks_mut(plane).enumerate() {
                let bv = bias.data()[co];
                row.iter_mut().for_each(|v| *v += bv);
            }
        }
    }
    out.debug_check_finite("conv2d", &[input, weights, bias.unwrap_or(weights)]);
    Ok(out)
}

/// Gradients of [`conv2d`] with respect to input, weights and bias.
pub fn conv2d_backward<T: Real>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    grad_out: &Tensor<T>,
    geom: &ConvGeometry,
    pad_value: T,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let ([n, cin, h, w], (oh, ow)) = geom.check(input, weights)?;
    let cout = geom.out_channels;
    grad_out.expect_shape(&[n, cout, oh, ow])?;
    let fan = geom.fan_in();
    let plane = oh * ow;
    let mut cols = vec![T::zero(); fan * plane];
    let mut dcols = vec![T::zero(); fan * plane];
    let mut grad_in = Tensor::zeros(input.shape().to_vec());
    let mut grad_w = Tensor::zeros(weights.shape().to_vec());
    let mut grad_b = Tensor::zeros([cout]);
    let x = input.data();
    let sample = cin * h * w;
    for b in 0..n {
        let go = &grad_out.data()[b * cout * plane..(b + 1) * cout * plane];
        im2col(&x[b * sample..(b + 1) * sample], cin, h, w, geom, pad_value, &mut cols);
        // dW += dY * cols^T
        gemm(
            MatRef::new(go, cout, plane),
            MatRef::transposed(&cols, plane, fan),
            grad_w.data_mut(),
            true,
        );
        // dcols = W^T * dY
        gemm(
            MatRef::transposed(weights.data(), fan, cout),
            MatRef::new(go, cout, plane),
            &mut dcols,
            false,
        );
        col2im(&dcols, cin, h, w, geom, &mut grad_in.data_mut()[b * sample..(b + 1) * sample]);
        for (co, row) in go.chunks(plane).enumerate() {
            grad_b.data_mut()[co] += row.iter().copied().sum::<T>();
        }
    }
    Ok((grad_in, grad_w, grad_b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Second, independently written loop nest: gathers per output pixel
    /// over a zero-copy padded view rather than bounds-checking per tap.
    fn triple_loop_oracle(
        x: &Tensor<f64>,
        wt: &Tensor<f64>,
        stride: usize,
        pad: usize,
        pad_value: f64,
    ) -> Tensor<f64> {
        let [n, c, h, w] = x.dims4().unwrap();
        let [co, _, k, _] = wt.dims4().unwrap();
        let (hp, wp) = (h + 2 * pad, w + 2 * pad);
        let padded = |b: usize, ch: usize, y: usize, xx: usize| {
            if y < pad || xx < pad || y >= h + pad || xx >= w + pad {
                pad_value
            } else {
                x.data()[((b * c + ch) * h + y - pad) * w + xx - pad]
            }
        };
        let oh = (hp - k) / stride + 1;
        let ow = (wp - k) / stride + 1;
        let mut out = vec![0.0; n * co * oh * ow];
        let mut idx = 0;
        for b in 0..n {
            for o in 0..co {
                for y in 0..oh {
                    for xx in 0..ow {
                        let mut acc = 0.0;
                        for (t, wv) in wt.data()[o * c * k * k..(o + 1) * c * k * k].iter().enumerate() {
                            let ch = t / (k * k);
                            let ky = (t / k) % k;
                            let kx = t % k;
                            acc += wv * padded(b, ch, y * stride + ky, xx * stride + kx);
                        }
                        out[idx] = acc;
                        idx += 1;
                    }
                }
            }
        }
        Tensor::new([n, co, oh, ow], out).unwrap()
    }

    #[test]
    fn identity_scaled_kernel() {
        let x = Tensor::<f32>::ones([1, 1, 3, 3]);
        let w = Tensor::new([1, 1, 1, 1], vec![2.0]).unwrap();
        let out = conv2d_ref(&x, &w, &ConvGeometry::new(1, 1, 1), 0.0).unwrap();
        assert_eq!(out.shape(), &[1, 1, 3, 3]);
        assert!(out.data().iter().all(|&v| v == 2.0));
    }

    #[test]
    fn two_output_channels_of_positive_unit_weights() {
        let x = Tensor::new([1, 1, 1, 1], vec![1.0f32]).unwrap();
        let w = Tensor::new([2, 1, 1, 1], vec![1.0, 1.0]).unwrap();
        let out = conv2d_ref(&x, &w, &ConvGeometry::new(1, 2, 1), 0.0).unwrap();
        assert_eq!(out.data(), &[1.0, 1.0]);
    }

    #[test]
    fn reference_matches_independent_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = Tensor::<f64>::randn([2, 3, 8, 8], 1.0, &mut rng);
        let w = Tensor::<f64>::randn([4, 3, 3, 3], 1.0, &mut rng);
        for (stride, pad) in [(1, 0), (1, 1), (2, 1), (2, 0)] {
            let g = ConvGeometry::new(3, 4, 3).stride(stride).padding(pad);
            let got = conv2d_ref(&x, &w, &g, 0.0).unwrap();
            let want = triple_loop_oracle(&x, &w, stride, pad, 0.0);
            assert!(got.max_abs_diff(&want).unwrap() <= 1e-5);
        }
    }

    #[test]
    fn fast_conv_matches_reference_with_custom_pad() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let x = Tensor::<f64>::randn([2, 3, 7, 6], 1.0, &mut rng);
        let w = Tensor::<f64>::randn([5, 3, 3, 3], 1.0, &mut rng);
        for (stride, pad, pv) in [(1, 1, 0.0), (2, 1, 1.0), (1, 2, -0.5)] {
            let g = ConvGeometry::new(3, 5, 3).stride(stride).padding(pad);
            let fast = conv2d(&x, &w, None, &g, pv).unwrap();
            let slow = conv2d_ref(&x, &w, &g, pv).unwrap();
            assert!(fast.max_abs_diff(&slow).unwrap() < 1e-10);
        }
    }

    #[test]
    fn conv_is_linear_in_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let g = ConvGeometry::new(2, 3, 3).padding(1);
        let x = Tensor::<f32>::randn([1, 2, 5, 5], 1.0, &mut rng);
        let y = Tensor::<f32>::randn([1, 2, 5, 5], 1.0, &mut rng);
        let w = Tensor::<f32>::randn([3, 2, 3, 3], 1.0, &mut rng);
        let a = 1.7f32;
        let lhs = conv2d_ref(&x.scale(a), &w, &g, 0.0).unwrap();
        let rhs = conv2d_ref(&x, &w, &g, 0.0).unwrap().scale(a);
        assert!(lhs.max_abs_diff(&rhs).unwrap() <= 1e-5);
        let lhs = conv2d_ref(&x.add(&y).unwrap(), &w, &g, 0.0).unwrap();
        let rhs = conv2d_ref(&x, &w, &g, 0.0).unwrap().add(&conv2d_ref(&y, &w, &g, 0.0).unwrap()).unwrap();
        assert!(lhs.max_abs_diff(&rhs).unwrap() <= 1e-5);
    }

    #[test]
    fn positive_rescaling_preserves_output_signs() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let g = ConvGeometry::new(3, 4, 3);
        let x = Tensor::<f32>::randn([2, 3, 6, 6], 1.0, &mut rng);
        let w = Tensor::<f32>::randn([4, 3, 3, 3], 1.0, &mut rng);
        let z = conv2d_ref(&x, &w, &g, 0.0).unwrap();
        let scaled = z.scale(0.37 * 2.9);
        for (a, b) in z.data().iter().zip(scaled.data()) {
            assert_eq!(a.signum(), b.signum());
        }
    }

    #[test]
    fn shape_mismatch_is_descriptive() {
        let x = Tensor::<f32>::zeros([1, 2, 4, 4]);
        let w = Tensor::<f32>::zeros([1, 3, 3, 3]);
        let err = conv2d_ref(&x, &w, &ConvGeometry::new(3, 1, 3), 0.0).unwrap_err();
        assert!(err.to_string().contains("input channels"), "{err}");
        let err = conv2d(&Tensor::<f32>::zeros([1, 3, 2, 2]), &w, None, &ConvGeometry::new(3, 1, 3), 0.0)
            .unwrap_err();
        assert!(err.to_string().contains("smaller than kernel"), "{err}");
    }

    #[test]
    fn backward_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let g = ConvGeometry::new(2, 3, 3).stride(2).padding(1);
        let x = Tensor::<f64>::randn([2, 2, 5, 5], 1.0, &mut rng);
        let w = Tensor::<f64>::randn([3, 2, 3, 3], 1.0, &mut rng);
        let bias = Tensor::<f64>::randn([3], 1.0, &mut rng);
        let probe = Tensor::<f64>::randn([2, 3, 3, 3], 1.0, &mut rng);
        let loss = |x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>| {
            let y = conv2d(x, w, Some(b), &g, 0.5).unwrap();
            y.data().iter().zip(probe.data()).map(|(a, b)| a * b).sum::<f64>()
        };
        let (gx, gw, gb) = conv2d_backward(&x, &w, &probe, &g, 0.5).unwrap();
        let eps = 1e-6;
        let check = |analytic: &Tensor<f64>, which: usize| {
            for i in 0..analytic.len() {
                let (mut xp, mut wp, mut bp) = (x.clone(), w.clone(), bias.clone());
                let (mut xm, mut wm, mut bm) = (x.clone(), w.clone(), bias.clone());
                match which {
                    0 => {
                        xp.data_mut()[i] += eps;
                        xm.data_mut()[i] -= eps;
                    }
                    1 => {
                        wp.data_mut()[i] += eps;
                        wm.data_mut()[i] -= eps;
                    }
                    _ => {
                        bp.data_mut()[i] += eps;
                        bm.data_mut()[i] -= eps;
                    }
                }
                let num = (loss(&xp, &wp, &bp) - loss(&xm, &wm, &bm)) / (2.0 * eps);
                let a = analytic.data()[i];
                assert!((a - num).abs() <= 1e-6 * num.abs().max(1.0), "{which}:{i} {a} vs {num}");
            }
        };
        check(&gx, 0);
        check(&gw, 1);
        check(&gb, 2);
    }
}
