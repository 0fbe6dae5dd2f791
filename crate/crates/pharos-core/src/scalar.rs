//! Scalar abstraction for the floating-point parts of the toolkit.
//!
//! Hash codes are exact integers; everything touching network outputs,
//! weights, losses, and metrics is generic over [`Real`] so the same code
//! runs in `f32` or `f64`. Concrete aliases live at the crate root.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Floating-point scalar for network math, attack losses, and metrics.
pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + AddAssign
    + SubAssign
    + MulAssign
    + Sum
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
}

impl Real for f32 {}
impl Real for f64 {}

/// Lift an `f64` constant into the working scalar type.
#[inline]
pub fn real<T: Real>(x: f64) -> T {
    T::from_f64(x).expect("f64 constant not representable in scalar type")
}
