//! Scalar abstraction for the numeric core.
//!
//! Everything math-heavy is generic over [`Scalar`] so the same code runs in
//! f32 or f64. The experiment harness pins f64 (see the crate-root aliases):
//! gradient verification against central differences and the 64-bit checkpoint
//! layout both need double precision, while f32 stays available for callers
//! that only want the layers.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssignOps, ToPrimitive};

pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + NumAssignOps
    + Sum<Self>
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + 'static
{
    /// Lossy conversion from f64, used for literals and config values.
    fn from_f64_c(v: f64) -> Self;

    /// Lossy conversion to f64, used for reporting and serialization.
    fn to_f64_c(self) -> f64;
}

impl Scalar for f32 {
    fn from_f64_c(v: f64) -> Self {
        v as f32
    }
    fn to_f64_c(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn from_f64_c(v: f64) -> Self {
        v
    }
    fn to_f64_c(self) -> f64 {
        self
    }
}

/// Shorthand for scalar literals inside generic code: `c::<S>(0.5)`.
#[inline]
pub fn c<S: Scalar>(v: f64) -> S {
    S::from_f64_c(v)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sum_of_halves<S: Scalar>(n: usize) -> S {
        (0..n).map(|_| c::<S>(0.5)).sum()
    }

    #[test]
    fn generic_code_runs_in_both_widths() {
        assert_eq!(sum_of_halves::<f64>(4), 2.0);
        assert_eq!(sum_of_halves::<f32>(4), 2.0f32);
    }

    #[test]
    fn conversions_round_trip_for_f64() {
        let v = 0.123456789012345_f64;
        assert_eq!(f64::from_f64_c(v).to_f64_c(), v);
    }
}
