//! Scalar abstraction for the tensor engine.
//!
//! All numeric kernels are generic over [`Scalar`] so the same code runs at
//! f32 (production) and f64 (gradient checking). Reductions accumulate in
//! f64 regardless of the element type.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssignOps, ToPrimitive};

/// Element type of a [`crate::tensor::Tensor`]: f32 or f64.
pub trait Scalar:
    Float + NumAssignOps + FromPrimitive + ToPrimitive + Sum + Debug + Display + Default + 'static
{
    /// Lossy conversion from f64 (rounds to nearest representable value).
    fn of_f64(x: f64) -> Self;

    /// Widening conversion to f64 (exact for f32 and f64).
    fn as_f64(self) -> f64;
}

impl Scalar for f32 {
    #[inline(always)]
    fn of_f64(x: f64) -> Self {
        x as f32
    }

    #[inline(always)]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    #[inline(always)]
    fn of_f64(x: f64) -> Self {
        x
    }

    #[inline(always)]
    fn as_f64(self) -> f64 {
        self
    }
}
