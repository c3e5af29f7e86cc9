//! Bit-packed `{-1, +1}` tensors and XNOR/popcount arithmetic.
//!
//! Bit convention: a set bit is `+1`, a clear bit is `-1`. A tensor is packed
//! row by row (the leading dimension is the row axis, everything after it is
//! flattened into the row). Bit `i` of word `j` within a row holds logical
//! position `64 * j + i`. Bits past the end of a row are padding and are
//! always set, so two padded rows agree on every pad position.

pub mod bench;
mod conv;

pub use bench::OpCounts;
pub use conv::{bitconv2d, bitconv2d_signs, PackedConvPlan};

use crate::autograd::sign_value;
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub const WORD_BITS: usize = 64;

pub fn words_for(bits: usize) -> usize {
    bits.div_ceil(WORD_BITS)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BitTensor {
    shape: Vec<usize>,
    rows: usize,
    row_bits: usize,
    words_per_row: usize,
    words: Vec<u64>,
}

impl BitTensor {
    /// Packs `sign(x)`, one row per index of the leading dimension.
    pub fn pack<T: Real>(x: &Tensor<T>) -> Self {
        let rows = if x.shape().len() >= 2 { x.shape()[0] } else { 1 };
        Self::pack_rows(x, rows)
    }

    /// Packs `sign(x)` as a single row (the densest layout).
    pub fn pack_flat<T: Real>(x: &Tensor<T>) -> Self {
        Self::pack_rows(x, 1)
    }

    fn pack_rows<T: Real>(x: &Tensor<T>, rows: usize) -> Self {
        let row_bits = x.len().checked_div(rows).unwrap_or(0);
        let words_per_row = words_for(row_bits);
        let mut words = vec![u64::MAX; rows * words_per_row];
        for r in 0..rows {
            let src = &x.data()[r * row_bits..(r + 1) * row_bits];
            let dst = &mut words[r * words_per_row..(r + 1) * words_per_row];
            for (i, &v) in src.iter().enumerate() {
                if sign_value(v) < T::zero() {
                    dst[i / WORD_BITS] &= !(1u64 << (i % WORD_BITS));
                }
            }
        }
        BitTensor { shape: x.shape().to_vec(), rows, row_bits, words_per_row, words }
    }

    /// Rebuilds a tensor from raw row words, checking the padding invariant.
    pub fn from_words(shape: Vec<usize>, rows: usize, words: Vec<u64>) -> Result<Self> {
        let total: usize = shape.iter().product();
        if rows == 0 && total != 0 || rows != 0 && !total.is_multiple_of(rows) {
            return Err(Error::shape(format!("{total} bits do not split into {rows} rows")));
        }
        let row_bits = total.checked_div(rows).unwrap_or(0);
        let words_per_row = words_for(row_bits);
        if words.len() != rows * words_per_row {
            return Err(Error::Format(format!(
                "expected {} words for {rows} rows of {row_bits} bits, got {}",
                rows * words_per_row,
                words.len()
            )));
        }
        let t = BitTensor { shape, rows, row_bits, words_per_row, words };
        let pad = t.pad_mask();
        if pad != 0 {
            for r in 0..rows {
                if t.row(r)[words_per_row - 1] & pad != pad {
                    return Err(Error::Format(format!("row {r} has clear padding bits")));
                }
            }
        }
        Ok(t)
    }

    /// Bits of the last word of each row that lie past the row end.
    fn pad_mask(&self) -> u64 {
        let used = self.row_bits % WORD_BITS;
        if used == 0 {
            0
        } else {
            !((1u64 << used) - 1)
        }
    }

    /// Same logical values with `rows` rows.
    pub fn regroup(&self, rows: usize) -> Result<BitTensor> {
        let total = self.len();
        if rows == 0 || !total.is_multiple_of(rows) {
            return Err(Error::shape(format!("{total} bits do not split into {rows} rows")));
        }
        let row_bits = total / rows;
        let words_per_row = words_for(row_bits);
        let mut words = vec![u64::MAX; rows * words_per_row];
        for i in 0..total {
            if !self.bit(i) {
                let (r, j) = (i / row_bits, i % row_bits);
                words[r * words_per_row + j / WORD_BITS] &= !(1u64 << (j % WORD_BITS));
            }
        }
        Ok(BitTensor { shape: self.shape.clone(), rows, row_bits, words_per_row, words })
    }

    pub fn unpack<T: Real>(&self) -> Tensor<T> {
        Tensor::from_fn(self.shape.clone(), |i| if self.bit(i) { T::one() } else { -T::one() })
    }

    /// Logical element `i` in row-major order; `true` is `+1`.
    #[inline]
    pub fn bit(&self, i: usize) -> bool {
        let (r, j) = (i / self.row_bits, i % self.row_bits);
        self.words[r * self.words_per_row + j / WORD_BITS] >> (j % WORD_BITS) & 1 == 1
    }

    pub fn row(&self, r: usize) -> &[u64] {
        &self.words[r * self.words_per_row..(r + 1) * self.words_per_row]
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn row_bits(&self) -> usize {
        self.row_bits
    }

    pub fn words_per_row(&self) -> usize {
        self.words_per_row
    }

    pub fn words(&self) -> &[u64] {
        &self.words
    }

    pub fn len(&self) -> usize {
        self.rows * self.row_bits
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Population count without relying on a hardware instruction.
#[inline]
pub fn popcount_portable(mut x: u64) -> u32 {
    x -= (x >> 1) & 0x5555_5555_5555_5555;
    x = (x & 0x3333_3333_3333_3333) + ((x >> 2) & 0x3333_3333_3333_3333);
    x = (x + (x >> 4)) & 0x0f0f_0f0f_0f0f_0f0f;
    (x.wrapping_mul(0x0101_0101_0101_0101) >> 56) as u32
}

/// Counts positions where two rows agree: `popcount(!(a ^ b))`.
pub type MatchFn = fn(&[u64], &[u64]) -> u32;

pub fn matches_portable(a: &[u64], b: &[u64]) -> u32 {
    a.iter().zip(b).map(|(x, y)| popcount_portable(!(x ^ y))).sum()
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "popcnt")]
unsafe fn matches_popcnt_impl(a: &[u64], b: &[u64]) -> u32 {
    a.iter().zip(b).map(|(x, y)| (!(x ^ y)).count_ones()).sum()
}

#[cfg(target_arch = "x86_64")]
fn matches_popcnt(a: &[u64], b: &[u64]) -> u32 {
    // SAFETY: only handed out by `match_kernel` after feature detection.
    unsafe { matches_popcnt_impl(a, b) }
}

/// Hardware popcount where the CPU has it, the portable kernel otherwise.
pub fn match_kernel() -> MatchFn {
    #[cfg(target_arch = "x86_64")]
    {
        if std::arch::is_x86_feature_detected!("popcnt") {
            return matches_popcnt;
        }
    }
    matches_portable
}

/// Exact `±1` dot product over the first `n` positions of two padded rows.
///
/// Pad positions hold `1` in both rows and so always match; with `t` total
/// bits and `m` matches the valid matches are `m - (t - n)` and the dot
/// product is `2 (m - (t - n)) - n = 2m - 2t + n`.
pub fn xnor_popcount_dot(a: &[u64], b: &[u64], n: usize) -> Result<i64> {
    if a.len() != b.len() {
        return Err(Error::shape(format!("rows of {} and {} words", a.len(), b.len())));
    }
    if words_for(n) != a.len() {
        return Err(Error::shape(format!("{n} valid bits in rows of {} words", a.len())));
    }
    Ok(dot_with(match_kernel(), a, b, n))
}

#[inline]
pub(crate) fn dot_with(kernel: MatchFn, a: &[u64], b: &[u64], n: usize) -> i64 {
    let m = kernel(a, b) as i64;
    2 * m - 2 * (a.len() * WORD_BITS) as i64 + n as i64
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_and_negative_zero_pack_as_plus_one() {
        let x = Tensor::new([3], vec![-0.0f32, 0.0, -1.0]).unwrap();
        let b = BitTensor::pack(&x);
        assert_eq!(b.unpack::<f32>().data(), &[1.0, 1.0, -1.0]);
    }

    #[test]
    fn sixty_five_elements_span_two_words_with_set_padding() {
        let x = Tensor::<f32>::full([65], -1.0);
        let b = BitTensor::pack(&x);
        assert_eq!(b.words_per_row(), 2);
        assert_eq!(b.words()[0], 0);
        assert_eq!(b.words()[1], !1u64);
        assert_eq!(b.words()[1].count_ones(), 63);
    }

    #[test]
    fn rows_follow_leading_dimension() {
        let x = Tensor::<f32>::from_fn([3, 2, 5, 5], |i| if i % 3 == 0 { -1.0 } else { 1.0 });
        let b = BitTensor::pack(&x);
        assert_eq!((b.rows(), b.row_bits(), b.words_per_row()), (3, 50, 1));
        assert_eq!(b.unpack::<f32>(), x.map(sign_value));
        let flat = BitTensor::pack_flat(&x);
        assert_eq!(flat.words().len(), words_for(150));
        assert_eq!(flat.regroup(3).unwrap(), b);
    }

    #[test]
    fn from_words_rejects_clear_padding() {
        let good = BitTensor::pack(&Tensor::<f32>::full([1, 3], -1.0));
        assert!(BitTensor::from_words(vec![1, 3], 1, good.words().to_vec()).is_ok());
        assert!(BitTensor::from_words(vec![1, 3], 1, vec![0]).is_err());
        assert!(BitTensor::from_words(vec![1, 3], 1, vec![0, 0]).is_err());
    }

    #[test]
    fn small_dot_products() {
        let a = BitTensor::pack(&Tensor::new([3], vec![1.0f32, -1.0, 1.0]).unwrap());
        let b = BitTensor::pack(&Tensor::new([3], vec![1.0f32, 1.0, 1.0]).unwrap());
        assert_eq!(xnor_popcount_dot(a.row(0), b.row(0), 3).unwrap(), 1);
        assert_eq!(xnor_popcount_dot(a.row(0), a.row(0), 3).unwrap(), 3);
        assert!(xnor_popcount_dot(a.row(0), &[0, 0], 3).is_err());
    }

    #[test]
    fn long_rows_match_float_dot() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for n in [1, 63, 64, 65, 1000] {
            let x = Tensor::<f64>::randn([n], 1.0, &mut rng).map(sign_value);
            let y = Tensor::<f64>::randn([n], 1.0, &mut rng).map(sign_value);
            let want: f64 = x.data().iter().zip(y.data()).map(|(a, b)| a * b).sum();
            let (a, b) = (BitTensor::pack(&x), BitTensor::pack(&y));
            assert_eq!(xnor_popcount_dot(a.row(0), b.row(0), n).unwrap() as f64, want);
            assert_eq!(dot_with(matches_portable, a.row(0), b.row(0), n) as f64, want);
        }
    }

    proptest! {
        #[test]
        fn unpack_of_pack_is_sign(values in proptest::collection::vec(-5.0f32..5.0, 0..300)) {
            let n = values.len();
            let x = Tensor::new([n], values).unwrap();
            let b = BitTensor::pack(&x);
            prop_assert_eq!(b.unpack::<f32>(), x.map(sign_value));
            prop_assert_eq!(BitTensor::pack(&b.unpack::<f32>()), b);
        }

        #[test]
        fn hardware_and_portable_popcount_agree(a in any::<u64>(), b in any::<u64>()) {
            prop_assert_eq!(popcount_portable(a), a.count_ones());
            prop_assert_eq!(match_kernel()(&[a], &[b]), matches_portable(&[a], &[b]));
        }
    }
}
