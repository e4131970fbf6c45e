//! Floating-point scalar abstraction shared by every numeric routine in the crate.
//!
//! The model, gradients and probes are written once against [`Scalar`] and
//! instantiated for `f32` or `f64`. Matrix products go through ndarray, which
//! dispatches to a blocked GEMM for both types.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use ndarray::{LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

/// Real scalar type usable as matrix element: `f32` or `f64`.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + NumAssign
    + LinalgScalar
    + ScalarOperand
    + Sum
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + 'static
{
    /// Short type name used in checkpoint headers and reports.
    const NAME: &'static str;

    #[inline]
    fn cast(x: f64) -> Self {
        Self::from_f64(x).expect("f64 is representable in every Scalar")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().expect("Scalar converts to f64")
    }
}

impl Scalar for f32 {
    const NAME: &'static str = "f32";
}

impl Scalar for f64 {
    const NAME: &'static str = "f64";
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cast_round_trip() {
        assert_eq!(f64::cast(0.25).as_f64(), 0.25);
        assert_eq!(f32::cast(0.5).as_f64(), 0.5);
        assert_eq!(<f32 as Scalar>::NAME, "f32");
    }
}
