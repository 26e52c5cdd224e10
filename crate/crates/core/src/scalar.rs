//! Scalar abstraction for the numeric core.
//!
//! Everything that does arithmetic is generic over [`Scalar`] so the same
//! code runs in `f32` and `f64`. The shipped pipeline instantiates `f64`
//! throughout; `f32` exists for memory-bound experiments.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssignOps, ToPrimitive};

/// Floating-point scalar usable by the encoder, losses and optimisers.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + NumAssignOps + Sum + Debug + Display + Send + Sync + 'static
{
    /// Lossy conversion from `f64`, for literals and config values.
    fn c(v: f64) -> Self {
        Self::from_f64(v).expect("finite f64 converts to any Scalar")
    }

    /// Conversion from a usize count.
    fn from_count(n: usize) -> Self {
        Self::from_usize(n).expect("usize fits in any Scalar")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}
