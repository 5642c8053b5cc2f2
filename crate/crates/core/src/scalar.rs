//! Scalar abstraction shared by every numeric routine in the crate.

use std::fmt::{Debug, Display, LowerExp};
use std::str::FromStr;

use num_traits::{Float, FromPrimitive, NumCast};

/// Floating-point element type for tensors, routing and losses.
///
/// Implemented for `f32` and `f64`. The training harness and the checked
/// acceptance tolerances assume `f64`.
pub trait Scalar:
    Float + FromPrimitive + Debug + Display + LowerExp + FromStr + Default + Send + Sync + 'static
{
    /// Converts an `f64` literal or configuration value into this scalar.
    #[inline]
    fn lit(v: f64) -> Self {
        <Self as NumCast>::from(v).expect("f64 literal representable in scalar type")
    }

    #[inline]
    fn to_f64_lossy(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }

    /// Stand-in for minus infinity in masked logits: the most negative finite value.
    #[inline]
    fn mask_value() -> Self {
        Self::min_value()
    }

    /// Whether a logit is masked, either by the finite sentinel or by a true `-inf`.
    #[inline]
    fn is_masked(self) -> bool {
        self <= Self::min_value()
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}
