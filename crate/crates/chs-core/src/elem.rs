//! Scalar element abstraction.
//!
//! The whole network is generic over the float width: training runs in `f32`
//! for speed, while gradient checking and the supervision-math oracles
//! instantiate the exact same code in `f64`.

use ndarray::{LinalgScalar, ScalarOperand};
use std::fmt::{Debug, Display};
use std::iter::Sum;

/// Floating-point element of tensors and density maps.
pub trait Elem:
    'static
    + Copy
    + Send
    + Sync
    + Debug
    + Display
    + PartialOrd
    + num_traits::Float
    + num_traits::NumAssign
    + Sum
    + ScalarOperand
    + LinalgScalar
{
    fn of(x: f64) -> Self;
    fn f64(self) -> f64;
}

impl Elem for f32 {
    #[inline]
    fn of(x: f64) -> Self {
        x as f32
    }
    #[inline]
    fn f64(self) -> f64 {
        self as f64
    }
}

impl Elem for f64 {
    #[inline]
    fn of(x: f64) -> Self {
        x
    }
    #[inline]
    fn f64(self) -> f64 {
        self
    }
}
