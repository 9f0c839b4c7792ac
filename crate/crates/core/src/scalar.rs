use std::fmt::{Debug, Display, LowerExp};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

/// Floating point type the whole pipeline is generic over.
///
/// Implemented for `f32` and `f64`. Training and gradient checking are
/// meant to run in `f64`; `f32` is the storage precision of blobs on disk
/// and is useful for cheap inference.
pub trait Scalar:
    'static
    + Float
    + FromPrimitive
    + ToPrimitive
    + NumAssign
    + Sum
    + Default
    + Debug
    + Display
    + LowerExp
    + Send
    + Sync
{
    /// Converts an `f64` literal. Never fails for the implemented types.
    #[inline]
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("f64 literal representable")
    }

    #[inline]
    fn from_count(n: usize) -> Self {
        Self::from_usize(n).expect("count representable")
    }

    /// Floor applied to norms and log arguments.
    #[inline]
    fn eps_floor() -> Self {
        Self::lit(crate::EPS_FLOOR)
    }

    /// `max(self, ε)`, except that NaN stays NaN.
    #[inline]
    fn floored(self) -> Self {
        if self.is_nan() {
            self
        } else {
            self.max(Self::eps_floor())
        }
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}
