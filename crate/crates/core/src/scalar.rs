use std::fmt::{Debug, Display};
use std::ops::AddAssign;

use num_traits::{Float, NumCast};

/// Element type of all tensors. Training runs in `f32`; gradient checking
/// runs in `f64` because central differences are unreliable in single
/// precision.
pub trait Scalar:
    Float + NumCast + AddAssign + Default + Debug + Display + Send + Sync + 'static
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

/// Shorthand for converting an `f64` constant into the active scalar type.
pub fn s<T: Scalar>(v: f64) -> T {
    T::from_f64(v)
}
