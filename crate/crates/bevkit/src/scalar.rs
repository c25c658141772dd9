//! Scalar abstraction: every numeric kernel in this crate is generic over a
//! floating-point type so the same code runs in `f32` (fast training) and
//! `f64` (gradient checks, oracles).

use ndarray::LinalgScalar;
use num_traits::{Float, NumAssign};
use serde::{de::DeserializeOwned, Serialize};
use std::fmt::{Debug, Display};
use std::iter::Sum;

/// Floating-point scalar usable throughout the crate.
///
/// `LinalgScalar` unlocks `ndarray`'s fast matrix-multiply path; the serde
/// bounds let tensors round-trip through checkpoints and datasets.
/// The conversion methods are named to avoid clashing with the `Option`
/// returning ones from `num_traits`.
pub trait Real:
    Float
    + NumAssign
    + LinalgScalar
    + Sum
    + Debug
    + Display
    + Serialize
    + DeserializeOwned
    + Send
    + Sync
    + 'static
{
    /// Lossy conversion from `f64` (rounds for `f32`).
    fn of_f64(v: f64) -> Self;
    /// Widening conversion to `f64` (exact for both supported types).
    fn as_f64(self) -> f64;
}

impl Real for f32 {
    #[inline]
    fn of_f64(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        f64::from(self)
    }
}

impl Real for f64 {
    #[inline]
    fn of_f64(v: f64) -> Self {
        v
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sum_generic<T: Real>(xs: &[f64]) -> f64 {
        xs.iter().map(|&x| T::of_f64(x)).sum::<T>().as_f64()
    }

    #[test]
    fn both_scalars_implement_the_trait() {
        assert_eq!(sum_generic::<f64>(&[0.5, 0.25]), 0.75);
        assert_eq!(sum_generic::<f32>(&[0.5, 0.25]), 0.75);
    }

    #[test]
    fn f64_roundtrip_is_exact() {
        let v = 0.123_456_789_012_345_67;
        assert_eq!(f64::of_f64(v).as_f64(), v);
    }
}
