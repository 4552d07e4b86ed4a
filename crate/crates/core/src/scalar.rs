//! Floating point abstraction shared by every numeric module.
//!
//! Checkpoints always store `f32`; `f64` exists so the same model code can be
//! driven in double precision (finite-difference gradient checks in particular).

use std::fmt::{Debug, Display};

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

/// Real scalar usable by tensors, models and optimizers: `f32` or `f64`.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + NumAssign + Default + Debug + Display + Send + Sync + 'static
{
    /// Gauss error function.
    fn erf(self) -> Self;

    /// Lossy conversion from `f64`; used for constants and accumulator results.
    #[inline]
    fn from_f64c(v: f64) -> Self {
        <Self as FromPrimitive>::from_f64(v).expect("f64 converts to every Scalar")
    }

    #[inline]
    fn to_f64c(self) -> f64 {
        ToPrimitive::to_f64(&self).expect("every Scalar converts to f64")
    }

    #[inline]
    fn from_f32c(v: f32) -> Self {
        <Self as FromPrimitive>::from_f32(v).expect("f32 converts to every Scalar")
    }

    #[inline]
    fn to_f32c(self) -> f32 {
        ToPrimitive::to_f32(&self).expect("every Scalar converts to f32")
    }
}

impl Scalar for f32 {
    #[inline]
    fn erf(self) -> Self {
        libm::erff(self)
    }
}

impl Scalar for f64 {
    #[inline]
    fn erf(self) -> Self {
        libm::erf(self)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn erf_matches_known_values() {
        assert!((Scalar::erf(1.0f64) - 0.842_700_792_949_714_9).abs() < 1e-15);
        assert!((Scalar::erf(0.5f32) - 0.520_499_9).abs() < 1e-6);
        assert_eq!(Scalar::erf(0.0f64), 0.0);
    }
}
