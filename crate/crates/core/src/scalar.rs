//! Scalar abstraction shared by every numeric routine in the crate.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

/// Floating point scalar the estimators and trees are generic over.
///
/// Implemented for `f32` and `f64`. Everything user-facing defaults to
/// `f64` through the aliases at the crate root.
pub trait Real:
    Float + FromPrimitive + ToPrimitive + NumAssign + Sum + Debug + Display + Default + Send + Sync + 'static
{
    /// Lossy conversion from an `f64` literal.
    #[inline]
    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("f64 literal representable")
    }

    #[inline]
    fn from_count(n: usize) -> Self {
        Self::from_usize(n).expect("count representable")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }

    /// Tolerance floor: `tol` or a few ulps of the type, whichever is larger.
    #[inline]
    fn tol(tol: f64) -> Self {
        let floor = Self::epsilon() * Self::lit(16.0);
        Self::lit(tol).max(floor)
    }
}

impl Real for f32 {}
impl Real for f64 {}

/// Numerically stable inverse logit.
#[inline]
pub fn expit<T: Real>(eta: T) -> T {
    if eta >= T::zero() {
        T::one() / (T::one() + (-eta).exp())
    } else {
        let e = eta.exp();
        e / (T::one() + e)
    }
}
