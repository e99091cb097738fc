//! Scalar abstraction: every numeric kernel in the crate is generic over
//! [`Scalar`] so the same code runs in `f32` (training) and `f64`
//! (wide-precision gradient checks).

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// The floating-point element type of tensors and graphs.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + std::iter::Sum
    + std::ops::AddAssign
    + std::ops::SubAssign
    + std::ops::MulAssign
    + std::fmt::Debug
    + std::fmt::Display
    + Default
    + Send
    + Sync
    + 'static
{
    /// Lossy conversion from `f64`. All literals in generic code go through
    /// this so constants are rounded once, deterministically.
    fn of_f64(x: f64) -> Self {
        <Self as FromPrimitive>::from_f64(x).expect("finite f64 converts to any Scalar")
    }

    /// Widening (for `f32`) or identity (for `f64`) conversion.
    fn to_f64_lossy(self) -> f64 {
        <Self as ToPrimitive>::to_f64(&self).expect("Scalar converts to f64")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Free-function shorthand for `T::of_f64` at call sites where the turbofish
/// would be noisy: `fl::<T>(0.5)`.
pub fn fl<T: Scalar>(x: f64) -> T {
    T::of_f64(x)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_f32() {
        let x: f32 = Scalar::of_f64(0.25);
        assert_eq!(x, 0.25f32);
        assert_eq!(x.to_f64_lossy(), 0.25f64);
    }

    #[test]
    fn lossy_narrowing_rounds_once() {
        // 0.1 is not representable; conversion must match a direct cast.
        let x: f32 = fl(0.1);
        assert_eq!(x, 0.1f64 as f32);
    }
}
