//! Floating-point scalar abstraction shared by every numeric module.

use ndarray::NdFloat;
use num_traits::{FloatConst, FromPrimitive, ToPrimitive};
use serde::de::DeserializeOwned;
use serde::Serialize;

/// Element type for encoder weights, features and losses: `f32` or `f64`.
pub trait Scalar:
    NdFloat + FloatConst + FromPrimitive + ToPrimitive + Default + Serialize + DeserializeOwned + 'static
{
    /// Lossy conversion from `f64` literals.
    #[inline]
    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("f64 literal representable")
    }

    #[inline]
    fn from_len(n: usize) -> Self {
        Self::from_usize(n).expect("length representable")
    }

    #[inline]
    fn f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }

    /// Gauss error function, evaluated in double precision.
    #[inline]
    fn erf(self) -> Self {
        Self::lit(libm::erf(self.f64()))
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}
