//! Floating-point abstraction shared by the numerical modules.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Real scalar used throughout the estimators: `f32` or `f64`.
pub trait Real: Float + FromPrimitive + ToPrimitive + Sum + Default + Debug + Display + Send + Sync + 'static {
    /// Lossy conversion from an `f64` literal.
    #[inline]
    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("f64 literal representable")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().expect("finite conversion to f64")
    }

    /// `sqrt(2/pi)`, the mean absolute value of a standard normal.
    #[inline]
    fn mean_abs_normal() -> Self {
        Self::lit(std::f64::consts::FRAC_2_PI.sqrt())
    }
}

impl Real for f32 {}
impl Real for f64 {}
