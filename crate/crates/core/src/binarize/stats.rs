use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Sign-distribution diagnostics of a tensor about to be binarized.
///
/// `saturation` counts `|v| > 1`, `mismatch` counts `|v| < 1` and `boundary`
/// counts `|v| == 1`, so the three fractions sum to one.
#[derive(Clone, Debug, PartialEq)]
pub struct SignStats {
    pub count: usize,
    pub fraction_positive: f64,
    /// Per channel (axis 1) when requested, empty otherwise.
    pub channel_fraction_positive: Vec<f64>,
    /// Every value has the same sign.
    pub degenerate: bool,
    pub saturation: f64,
    pub mismatch: f64,
    pub boundary: f64,
}

impl SignStats {
    pub fn compute<T: Real>(x: &Tensor<T>, per_channel: bool) -> Result<Self> {
        if x.is_empty() {
            return Err(Error::shape("sign statistics of an empty tensor"));
        }
        let one = T::one();
        let (mut pos, mut sat, mut mis) = (0usize, 0usize, 0usize);
        for &v in x.data() {
            pos += (v >= T::zero()) as usize;
            sat += (v.abs() > one) as usize;
            mis += (v.abs() < one) as usize;
        }
        let n = x.len();
        let channel_fraction_positive = if per_channel {
            let shape = x.shape();
            if shape.len() < 2 {
                return Err(Error::shape(format!("per-channel statistics need a channel axis, got {shape:?}")));
            }
            let (c, inner) = (shape[1], shape[2..].iter().product::<usize>());
            let mut counts = vec![0usize; c];
            for (i, &v) in x.data().iter().enumerate() {
                counts[(i / inner) % c] += (v >= T::zero()) as usize;
            }
            let per = (n / c) as f64;
            counts.into_iter().map(|k| k as f64 / per).collect()
        } else {
            Vec::new()
        };
        let frac = |k: usize| k as f64 / n as f64;
        Ok(SignStats {
            count: n,
            fraction_positive: frac(pos),
            channel_fraction_positive,
            degenerate: pos == 0 || pos == n,
            saturation: frac(sat),
            mismatch: frac(mis),
            boundary: frac(n - sat - mis),
        })
    }

    /// One line of space-separated `key=value` pairs.
    pub fn to_kv(&self) -> String {
        let mut s = format!(
            "count={} fraction_positive={:.6} degenerate={} saturation={:.6} mismatch={:.6} boundary={:.6}",
            self.count, self.fraction_positive, self.degenerate, self.saturation, self.mismatch, self.boundary
        );
        if !self.channel_fraction_positive.is_empty() {
            s.push_str(" channel_fraction_positive=");
            for (i, f) in self.channel_fraction_positive.iter().enumerate() {
                let _ = write!(s, "{}{f:.6}", if i > 0 { "," } else { "" });
            }
        }
        s
    }

    /// Parses the pairs written by [`SignStats::to_kv`]; unrelated keys on
    /// the same line are ignored.
    pub fn from_kv(line: &str) -> Result<Self> {
        let kv: BTreeMap<&str, &str> = line.split_whitespace().filter_map(|t| t.split_once('=')).collect();
        let get = |k: &str| kv.get(k).copied().ok_or_else(|| Error::Format(format!("sign stats: missing {k}")));
        let num = |k: &str| get(k)?.parse::<f64>().map_err(|_| Error::Format(format!("sign stats: bad {k}")));
        let channel_fraction_positive = match kv.get("channel_fraction_positive") {
            Some(v) => v
                .split(',')
                .map(|f| f.parse().map_err(|_| Error::Format("sign stats: bad channel fraction".into())))
                .collect::<Result<_>>()?,
            None => Vec::new(),
        };
        Ok(SignStats {
            count: get("count")?.parse().map_err(|_| Error::Format("sign stats: bad count".into()))?,
            fraction_positive: num("fraction_positive")?,
            channel_fraction_positive,
            degenerate: get("degenerate")?.parse().map_err(|_| Error::Format("sign stats: bad degenerate".into()))?,
            saturation: num("saturation")?,
            mismatch: num("mismatch")?,
            boundary: num("boundary")?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn constant_half_is_degenerate_mismatch() {
        let s = SignStats::compute(&Tensor::<f32>::full([2, 3, 4, 4], 0.5), true).unwrap();
        assert!(s.degenerate);
        assert_eq!(s.mismatch, 1.0);
        assert_eq!(s.channel_fraction_positive, vec![1.0; 3]);
    }

    #[test]
    fn opposite_large_values_saturate() {
        let s = SignStats::compute(&Tensor::new([2], vec![-2.0f32, 2.0]).unwrap(), false).unwrap();
        assert_eq!(s.saturation, 1.0);
        assert!(!s.degenerate);
        assert_eq!(s.fraction_positive, 0.5);
    }

    #[test]
    fn fractions_partition_the_tensor() {
        let x = Tensor::new([5], vec![-1.0f64, 1.0, 0.0, 3.0, -0.5]).unwrap();
        let s = SignStats::compute(&x, false).unwrap();
        assert_eq!((s.saturation, s.mismatch, s.boundary), (0.2, 0.4, 0.4));
        assert_eq!(s.saturation + s.mismatch + s.boundary, 1.0);
    }

    #[test]
    fn normal_tensor_is_balanced() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let n = 10_000;
        let s = SignStats::compute(&Tensor::<f64>::randn([n], 1.0, &mut rng), false).unwrap();
        let sigma = (0.25 / n as f64).sqrt();
        assert!((s.fraction_positive - 0.5).abs() <= 3.0 * sigma, "{}", s.fraction_positive);
    }

    #[test]
    fn empty_tensor_is_an_error() {
        assert!(SignStats::compute(&Tensor::<f32>::zeros([0]), false).is_err());
        assert!(SignStats::compute(&Tensor::<f32>::zeros([3]), true).is_err());
    }

    #[test]
    fn text_round_trip() {
        let x = Tensor::new([1, 2, 1, 2], vec![0.25f64, -0.5, 1.0, 1.0]).unwrap();
        let s = SignStats::compute(&x, true).unwrap();
        let line = format!("layer=conv2 {}", s.to_kv());
        assert_eq!(SignStats::from_kv(&line).unwrap(), s);
    }
}
