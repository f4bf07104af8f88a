//! Scalar abstraction shared by the dense kernels and the decoding transforms.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Floating-point scalar: `f32` or `f64`.
pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    /// Tolerance used for "sums to one" style checks at this precision.
    fn simplex_tol() -> Self;

    /// Lift an `f64` constant; constants in this crate are always representable.
    #[inline]
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("f64 constant fits the scalar type")
    }
}

impl Real for f32 {
    fn simplex_tol() -> Self {
        1e-4
    }
}

impl Real for f64 {
    fn simplex_tol() -> Self {
        1e-9
    }
}
