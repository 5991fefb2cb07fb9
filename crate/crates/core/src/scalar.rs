//! Scalar abstraction for the numeric core.
//!
//! All dense math (tensors, autodiff, the transport solver, metrics) is
//! generic over [`Scalar`] so the same code runs in f32 or f64. The crate
//! root exports f64 aliases, which is what the model and trainer use.

use num_traits::{Float, FromPrimitive, NumAssignOps, ToPrimitive};
use std::fmt::{Debug, Display};

/// Floating-point scalar usable by the numeric core: f32 or f64.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + NumAssignOps + Debug + Display + Send + Sync + 'static
{
    /// Lossy conversion from f64, for literals and tolerances.
    fn from_f64_lossy(x: f64) -> Self {
        Self::from_f64(x).expect("f64 conversion")
    }

    /// Lossy conversion to f64, for reporting.
    fn to_f64_lossy(self) -> f64 {
        self.to_f64().expect("f64 conversion")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}
