use std::fmt::{Debug, Display};

use num_traits::Float;

/// Floating-point element type. Training runs in `f32`; gradient checks
/// rerun the same graphs in `f64`.
pub trait Scalar: Float + Debug + Display + Default + Send + Sync + 'static {
    const DTYPE: &'static str;

    fn erf(self) -> Self;

    fn from_f64(v: f64) -> Self;

    fn to_f64(self) -> f64;

    /// Converts between element types; lossy when narrowing.
    fn cast<U: Scalar>(self) -> U {
        U::from_f64(self.to_f64())
    }
}

impl Scalar for f32 {
    const DTYPE: &'static str = "f32";

    fn erf(self) -> Self {
        libm::erff(self)
    }

    fn from_f64(v: f64) -> Self {
        v as f32
    }

    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    const DTYPE: &'static str = "f64";

    fn erf(self) -> Self {
        libm::erf(self)
    }

    fn from_f64(v: f64) -> Self {
        v
    }

    fn to_f64(self) -> f64 {
        self
    }
}
