use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::Float;

/// Element type of tensors. Two widths are supported: `f32` for training
/// runs and `f64` for finite-difference gradient checks, where the
/// exponentials in the contrastive loss make single precision too noisy.
pub trait Scalar:
    Float + Sum + Debug + Display + Default + Send + Sync + 'static
{
    fn from_f64(x: f64) -> Self;
    fn as_f64(self) -> f64;

    fn from_f32(x: f32) -> Self {
        Self::from_f64(x as f64)
    }
    fn as_f32(self) -> f32 {
        self.as_f64() as f32
    }
}

impl Scalar for f32 {
    #[inline]
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    #[inline]
    fn from_f64(x: f64) -> Self {
        x
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}
