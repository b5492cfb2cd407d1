use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Real scalar used by the numerical kernels.
///
/// Everything in `linalg`, `vicreg`, `objective`, `dynamics` and `diagnostics`
/// is written against this trait; `f64` is the reference precision and `f32`
/// is supported for the same code paths with looser tolerances.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + 'static
{
    /// Lossy conversion from an `f64` literal.
    fn lit(x: f64) -> Self;

    fn from_count(n: usize) -> Self;

    fn to_f64_lossy(self) -> f64;

    /// Smallest off-diagonal Frobenius ratio the Jacobi sweeps try to reach.
    fn jacobi_tolerance() -> Self;
}

impl Scalar for f64 {
    #[inline]
    fn lit(x: f64) -> Self {
        x
    }
    #[inline]
    fn from_count(n: usize) -> Self {
        n as f64
    }
    #[inline]
    fn to_f64_lossy(self) -> f64 {
        self
    }
    fn jacobi_tolerance() -> Self {
        1e-12
    }
}

impl Scalar for f32 {
    #[inline]
    fn lit(x: f64) -> Self {
        x as f32
    }
    #[inline]
    fn from_count(n: usize) -> Self {
        n as f32
    }
    #[inline]
    fn to_f64_lossy(self) -> f64 {
        self as f64
    }
    fn jacobi_tolerance() -> Self {
        // 1e-12 is below f32 resolution; a few ulps of the norm is the floor.
        f32::EPSILON * 8.0
    }
}
