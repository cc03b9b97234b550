//! Scalar abstractions.
//!
//! Geometry, measures and transport are written against [`Real`] so they run in
//! `f32` or `f64`. The signed-measure bookkeeping is written against [`Exact`],
//! which admits arbitrary-precision rationals as well as floats.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, Num, Signed, ToPrimitive};

/// Floating point scalar used for velocities, weights and costs.
pub trait Real:
    Float + FromPrimitive + ToPrimitive + Debug + Display + Default + Sum + Send + Sync + 'static
{
    /// Lossy conversion from an `f64` literal.
    #[inline]
    fn of(x: f64) -> Self {
        Self::from_f64(x).expect("f64 is representable")
    }

    #[inline]
    fn to_f64_lossy(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }

    /// Machine epsilon scaled for "exact up to rounding" comparisons.
    #[inline]
    fn rounding_tol() -> Self {
        Self::epsilon() * Self::of(64.0)
    }
}

impl Real for f32 {}
impl Real for f64 {}

/// Ordered field with exact sign, used where sums must not round.
pub trait Exact: Clone + Num + Signed + PartialOrd + Debug {}

impl<T> Exact for T where T: Clone + Num + Signed + PartialOrd + Debug {}

/// Three-valued sign with `sign(0) = 0`.
pub fn sign3<T: Exact>(x: &T) -> i8 {
    let zero = T::zero();
    if *x > zero {
        1
    } else if *x < zero {
        -1
    } else {
        0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use num_rational::BigRational;

    #[test]
    fn sign_of_zero_is_zero() {
        assert_eq!(sign3(&0.0_f64), 0);
        assert_eq!(sign3(&-2.5_f64), -1);
        assert_eq!(sign3(&BigRational::from_float(0.25).unwrap()), 1);
    }

    #[test]
    fn literal_conversion() {
        assert_eq!(f32::of(0.5), 0.5_f32);
        assert!(f64::rounding_tol() < 1e-13);
    }
}
