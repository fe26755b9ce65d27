//! Scalar abstraction shared by every numeric routine in the crate.

use nalgebra::RealField;
use num_traits::{FromPrimitive, ToPrimitive};

/// Floating-point scalar the geometry and optimisation code is generic over.
///
/// Implemented for `f32` and `f64`. Tolerances quoted in `f64` terms are
/// widened through [`Real::tol`] so the same code paths stay usable in
/// single precision.
pub trait Real: RealField + Copy + FromPrimitive + ToPrimitive + Send + Sync + std::fmt::Display + 'static {
    /// Converts an `f64` constant into this scalar.
    #[inline]
    fn lit(v: f64) -> Self {
        <Self as FromPrimitive>::from_f64(v).expect("constant representable in scalar type")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        ToPrimitive::to_f64(&self).unwrap_or(f64::NAN)
    }

    #[inline]
    fn count(n: usize) -> Self {
        <Self as FromPrimitive>::from_usize(n).expect("count representable in scalar type")
    }

    /// `max(v, 100 ulp at 1.0)`: an absolute tolerance that never drops below
    /// the resolution of the scalar type.
    #[inline]
    fn tol(v: f64) -> Self {
        let floor = Self::default_epsilon() * Self::lit(100.0);
        Self::lit(v).max(floor)
    }

    #[inline]
    fn is_finite_value(self) -> bool {
        self.as_f64().is_finite()
    }
}

impl Real for f32 {}
impl Real for f64 {}
