//! Scalar abstraction: every numerical routine in this crate is generic over
//! the working precision and instantiated for `f32` and `f64` at the crate root.

use num_traits::{Float, FloatConst, FromPrimitive, NumAssign};
use std::fmt::{Debug, Display, LowerExp};
use std::iter::Sum;

/// Floating-point scalar usable for fields, spectra, and quadrature.
///
/// `rustfft::FftNum` brings `Copy + Send + Sync + 'static`, so values and
/// buffers of `T` can cross thread boundaries freely.
pub trait Scalar:
    Float + FloatConst + FromPrimitive + NumAssign + Sum + rustfft::FftNum + Display + LowerExp + Debug
{
}

impl<T> Scalar for T where
    T: Float
        + FloatConst
        + FromPrimitive
        + NumAssign
        + Sum
        + rustfft::FftNum
        + Display
        + LowerExp
        + Debug
{
}

/// Pulls an `f64` literal into the working precision.
#[inline]
pub fn lit<T: Scalar>(x: f64) -> T {
    T::from_f64(x).expect("literal representable in target precision")
}

/// Sums a slice pairwise. The tree reduction keeps results independent of
/// chunking decisions made by callers and bounds rounding error growth at
/// O(log n), which the determinism contract of the sweep outputs relies on.
pub fn pairwise_sum<T: Scalar>(xs: &[T]) -> T {
    if xs.len() <= 16 {
        let mut acc = T::zero();
        for &x in xs {
            acc += x;
        }
        return acc;
    }
    let mid = xs.len() / 2;
    pairwise_sum(&xs[..mid]) + pairwise_sum(&xs[mid..])
}

/// Pairwise sum of `f(i)` over `0..n` without materializing the terms.
pub fn pairwise_sum_by<T: Scalar, F: Fn(usize) -> T + Copy>(n: usize, f: F) -> T {
    fn go<T: Scalar, F: Fn(usize) -> T + Copy>(lo: usize, hi: usize, f: F) -> T {
        if hi - lo <= 16 {
            let mut acc = T::zero();
            for i in lo..hi {
                acc += f(i);
            }
            return acc;
        }
        let mid = lo + (hi - lo) / 2;
        go(lo, mid, f) + go(mid, hi, f)
    }
    go(0, n, f)
}

/// `l²` dot product with pairwise reduction.
pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    assert_eq!(a.len(), b.len());
    pairwise_sum_by(a.len(), |i| a[i] * b[i])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pairwise_matches_naive() {
        let xs: Vec<f64> = (0..1000).map(|i| (i as f64).sin()).collect();
        let naive: f64 = xs.iter().sum();
        assert!((pairwise_sum(&xs) - naive).abs() < 1e-12);
        assert!((pairwise_sum_by(xs.len(), |i| xs[i]) - naive).abs() < 1e-12);
    }

    #[test]
    fn lit_roundtrips() {
        assert_eq!(lit::<f64>(0.25), 0.25);
        assert_eq!(lit::<f32>(0.25), 0.25f32);
    }
}
