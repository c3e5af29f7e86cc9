use super::{dot_with, match_kernel, words_for, BitTensor, WORD_BITS};
use crate::error::{Error, Result};
use crate::tensor::{ConvGeometry, Real, Tensor};

const PAD: u32 = u32::MAX;

/// Precomputed im2row layout for one convolution shape.
///
/// Every output pixel reads a row of `Cin * K * K` bits in `(Cin, Kh, Kw)`
/// order. Taps that fall into the padding read `+1`, so every output sums
/// exactly `n = Cin * K * K` products, boundary pixels included.
#[derive(Clone, Debug)]
pub struct PackedConvPlan {
    pub geom: ConvGeometry,
    pub in_h: usize,
    pub in_w: usize,
    pub out_h: usize,
    pub out_w: usize,
    /// Valid bits per im2row row.
    pub n: usize,
    words_per_row: usize,
    /// Source offset within one `[C, H, W]` sample for every (pixel, tap).
    sources: Vec<u32>,
}

impl PackedConvPlan {
    pub fn new(geom: ConvGeometry, in_h: usize, in_w: usize) -> Result<Self> {
        geom.validate()?;
        let (out_h, out_w) = geom.output_hw(in_h, in_w)?;
        let (k, s, p) = (geom.kernel, geom.stride, geom.padding as isize);
        let n = geom.fan_in();
        if geom.in_channels * in_h * in_w >= PAD as usize {
            return Err(Error::shape("input sample too large for a packed plan"));
        }
        let mut sources = Vec::with_capacity(out_h * out_w * n);
        for y in 0..out_h {
            for x in 0..out_w {
                for c in 0..geom.in_channels {
                    for ky in 0..k {
                        for kx in 0..k {
                            let iy = (y * s + ky) as isize - p;
                            let ix = (x * s + kx) as isize - p;
                            sources.push(if iy < 0 || ix < 0 || iy >= in_h as isize || ix >= in_w as isize {
                                PAD
                            } else {
                                ((c * in_h + iy as usize) * in_w + ix as usize) as u32
                            });
                        }
                    }
                }
            }
        }
        Ok(PackedConvPlan { geom, in_h, in_w, out_h, out_w, n, words_per_row: words_for(n), sources })
    }

    pub fn words_per_row(&self) -> usize {
        self.words_per_row
    }

    /// Fills `row` with the im2row bits of output pixel `pixel` of `sample`.
    fn gather(&self, act: &BitTensor, sample: usize, pixel: usize, row: &mut [u64]) {
        row.iter_mut().for_each(|w| *w = u64::MAX);
        let base = sample * act.row_bits();
        for (j, &src) in self.sources[pixel * self.n..(pixel + 1) * self.n].iter().enumerate() {
            if src != PAD && !act.bit(base + src as usize) {
                row[j / WORD_BITS] &= !(1u64 << (j % WORD_BITS));
            }
        }
    }
}

/// XNOR/popcount convolution of packed activations `[N, Cin, H, W]` (one
/// row per sample) with packed weights `[Cout, Cin, K, K]` (one row per
/// output channel). Outputs are integers stored as floats.
pub fn bitconv2d<T: Real>(act: &BitTensor, weights: &BitTensor, plan: &PackedConvPlan) -> Result<Tensor<T>> {
    let g = &plan.geom;
    match act.shape() {
        [_, c, h, w] if *c == g.in_channels && *h == plan.in_h && *w == plan.in_w => {}
        other => {
            return Err(Error::shape(format!(
                "packed activations {other:?} do not match plan [N, {}, {}, {}]",
                g.in_channels, plan.in_h, plan.in_w
            )))
        }
    }
    if weights.shape() != g.weight_shape() || weights.rows() != g.out_channels {
        return Err(Error::shape(format!(
            "packed weights {:?} do not match plan {:?}",
            weights.shape(),
            g.weight_shape()
        )));
    }
    let n = act.shape()[0];
    if act.rows() != n {
        return Err(Error::shape("packed activations must hold one row per sample"));
    }
    let cout = g.out_channels;
    let pixels = plan.out_h * plan.out_w;
    let kernel = match_kernel();
    let mut out = Tensor::zeros([n, cout, plan.out_h, plan.out_w]);
    let mut row = vec![0u64; plan.words_per_row];
    let o = out.data_mut();
    for b in 0..n {
        for p in 0..pixels {
            plan.gather(act, b, p, &mut row);
            for co in 0..cout {
                let dot = dot_with(kernel, &row, weights.row(co), plan.n);
                o[(b * cout + co) * pixels + p] = T::from_f64(dot as f64);
            }
        }
    }
    Ok(out)
}

/// Packs `sign(input)` and `sign(weights)` and runs [`bitconv2d`].
pub fn bitconv2d_signs<T: Real>(input: &Tensor<T>, weights: &Tensor<T>, geom: &ConvGeometry) -> Result<Tensor<T>> {
    let [_, _, h, w] = input.dims4()?;
    let plan = PackedConvPlan::new(*geom, h, w)?;
    bitconv2d(&BitTensor::pack(input), &BitTensor::pack(weights), &plan)
}
