//! Scalar abstraction: all geometry, loss, and network math is written
//! against [`Real`] so the whole stack instantiates at `f32` or `f64`.

use std::fmt::{Debug, Display};

use num_traits::{Float, FromPrimitive, NumAssign};

/// Floating-point scalar: `f32` or `f64`.
pub trait Real:
    Float + FromPrimitive + NumAssign + Debug + Display + Send + Sync + 'static
{
    /// Lift an `f64` constant into the scalar type.
    fn c(v: f64) -> Self {
        Self::from_f64(v).expect("constant representable in scalar type")
    }

    /// Lift a count into the scalar type.
    fn from_count(n: usize) -> Self {
        Self::from_usize(n).expect("count representable in scalar type")
    }

    fn to_f64_lossy(self) -> f64 {
        num_traits::ToPrimitive::to_f64(&self).unwrap_or(f64::NAN)
    }
}

impl Real for f32 {}
impl Real for f64 {}
