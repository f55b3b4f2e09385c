//! Scalar abstraction shared by the dynamics, controller and solver.

use std::fmt::{Debug, Display};

use nalgebra::RealField;
use num_traits::{FromPrimitive, ToPrimitive};

/// Real floating-point scalar the numerical core is generic over (`f32` or `f64`).
pub trait Scalar:
    RealField + Copy + FromPrimitive + ToPrimitive + Debug + Display + Send + Sync + 'static
{
    /// Converts an `f64` literal into `Self`.
    #[inline]
    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("f64 literal is representable")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().expect("scalar converts to f64")
    }

    /// Machine epsilon of the concrete type.
    fn epsilon() -> Self;

    fn infinity() -> Self;
}

impl Scalar for f32 {
    fn epsilon() -> Self {
        f32::EPSILON
    }

    fn infinity() -> Self {
        f32::INFINITY
    }
}

impl Scalar for f64 {
    fn epsilon() -> Self {
        f64::EPSILON
    }

    fn infinity() -> Self {
        f64::INFINITY
    }
}
