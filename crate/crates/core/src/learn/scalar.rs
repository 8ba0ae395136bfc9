//! Element type abstraction: trains in `f32`, gradient-checks in `f64`.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use ndarray::{LinalgScalar, ScalarOperand};
use num_traits::Float;

/// Floating-point element usable by every layer. `f32` is the training type,
/// `f64` the verification type for finite-difference checks.
pub trait Scalar:
    LinalgScalar + Float + ScalarOperand + Debug + Display + Sum + Send + Sync + 'static
{
    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Scalar for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }

    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }

    fn as_f64(self) -> f64 {
        self
    }
}
