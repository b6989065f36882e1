//! Floating-point element trait shared by every tensor in the crate.

use core::fmt::{Debug, Display};
use core::iter::Sum;
use core::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FloatConst};

/// Scalar element type of a [`Tensor`](crate::Tensor): `f32` for training,
/// `f64` for gradient checks.
pub trait Real:
    Float
    + FloatConst
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + 'static
{
    /// Lossy conversion from `f64`.
    fn of(x: f64) -> Self;
    fn as_f64(self) -> f64;
    /// Short dtype tag used in diagnostics.
    const DTYPE: DType;
}

impl Real for f32 {
    #[inline]
    fn of(x: f64) -> Self {
        x as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
    const DTYPE: DType = DType::F32;
}

impl Real for f64 {
    #[inline]
    fn of(x: f64) -> Self {
        x
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
    const DTYPE: DType = DType::F64;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F32,
    F64,
}
