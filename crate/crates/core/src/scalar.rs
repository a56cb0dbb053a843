use core::fmt;
use core::iter::Sum;
use core::ops::AddAssign;

use num_traits::{Float, FromPrimitive, ToPrimitive};
use rand_distr::uniform::SampleUniform;

/// Element type for tensors: `f64` for verification suites, `f32` for
/// training runs.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + SampleUniform
    + AddAssign
    + Sum
    + fmt::Debug
    + fmt::Display
    + Default
    + Send
    + Sync
    + 'static
{
    const TENSOR_DTYPE: &'static str;
}

impl Scalar for f32 {
    const TENSOR_DTYPE: &'static str = "f32";
}
impl Scalar for f64 {
    const TENSOR_DTYPE: &'static str = "f64";
}

/// Shorthand lossy conversion from `f64` literals into the element type.
#[inline]
pub fn s<T: Scalar>(x: f64) -> T {
    T::from_f64(x).expect("f64 conversion")
}

/// Lossy conversion from usize counts (token counts, pixel counts).
#[inline]
pub fn su<T: Scalar>(x: usize) -> T {
    T::from_usize(x).expect("usize conversion")
}
