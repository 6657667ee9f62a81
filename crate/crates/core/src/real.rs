//! Scalar abstraction so the network and training math can run in 32-bit for
//! production and 64-bit for gradient checks.

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive};

pub trait Real:
    Float
    + FromPrimitive
    + AddAssign
    + SubAssign
    + MulAssign
    + Sum
    + Default
    + Debug
    + Send
    + Sync
    + 'static
{
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("representable literal")
    }

    fn from_single(x: f32) -> Self;

    fn to_single(self) -> f32;
}

impl Real for f32 {
    #[inline(always)]
    fn lit(x: f64) -> Self {
        x as f32
    }

    #[inline(always)]
    fn from_single(x: f32) -> Self {
        x
    }

    #[inline(always)]
    fn to_single(self) -> f32 {
        self
    }
}

impl Real for f64 {
    #[inline(always)]
    fn lit(x: f64) -> Self {
        x
    }

    #[inline(always)]
    fn from_single(x: f32) -> Self {
        x as f64
    }

    #[inline(always)]
    fn to_single(self) -> f32 {
        self as f32
    }
}
