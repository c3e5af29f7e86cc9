use std::fmt;
use std::str::FromStr;

use crate::error::Error;
use crate::tensor::Real;

/// Binarization with `sign(0) = +1`. Negative zero counts as zero.
#[inline]
pub fn sign_value<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one()
    } else {
        -T::one()
    }
}

/// Surrogate derivative used for `sign` in the backward pass.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum SteKind {
    /// Indicator of `|x| <= 1`.
    #[default]
    ClipSte,
    /// Piecewise-linear `2 - 2|x|` on `[-1, 1]`, zero outside.
    ApproxSign,
}

impl SteKind {
    #[inline]
    pub fn derivative<T: Real>(self, x: T) -> T {
        let one = T::one();
        let two = T::from_f64(2.0);
        match self {
            SteKind::ClipSte => {
                if x.abs() <= one {
                    one
                } else {
                    T::zero()
                }
            }
            SteKind::ApproxSign => {
                if x < -one || x > one {
                    T::zero()
                } else if x < T::zero() {
                    two + two * x
                } else {
                    two - two * x
                }
            }
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            SteKind::ClipSte => "clip",
            SteKind::ApproxSign => "approxsign",
        }
    }
}

impl fmt::Display for SteKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SteKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "clip" | "clipste" | "ste" => Ok(SteKind::ClipSte),
            "approxsign" | "approx" => Ok(SteKind::ApproxSign),
            other => Err(Error::Config(format!("unknown ste kind '{other}' (clip|approxsign)"))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sign_zero_is_positive() {
        assert_eq!(sign_value(0.0f32), 1.0);
        assert_eq!(sign_value(-0.0f32), 1.0);
        assert_eq!(sign_value(-0.3f32), -1.0);
        assert_eq!(sign_value(2.1f32), 1.0);
    }

    #[test]
    fn closed_form_derivatives() {
        let clip: Vec<f64> = [-2.0, -1.0, 0.5, 1.0, 2.0].iter().map(|&x| SteKind::ClipSte.derivative(x)).collect();
        assert_eq!(clip, vec![0.0, 1.0, 1.0, 1.0, 0.0]);
        assert_eq!(SteKind::ApproxSign.derivative(0.5f64), 1.0);
        assert_eq!(SteKind::ApproxSign.derivative(-0.5f64), 1.0);
        assert_eq!(SteKind::ApproxSign.derivative(0.0f64), 2.0);
        assert_eq!(SteKind::ApproxSign.derivative(-1.0f64), 0.0);
        assert_eq!(SteKind::ApproxSign.derivative(1.5f64), 0.0);
    }

    #[test]
    fn parses_names() {
        assert_eq!("clip".parse::<SteKind>().unwrap(), SteKind::ClipSte);
        assert_eq!("approxsign".parse::<SteKind>().unwrap(), SteKind::ApproxSign);
        assert!("ede".parse::<SteKind>().is_err());
    }
}
