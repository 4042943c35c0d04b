//! Scalar abstraction shared by the decoder, aggregator and metrics.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};
use serde::de::DeserializeOwned;
use serde::Serialize;

/// Floating point scalar: `f32` or `f64`.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + Debug
    + Display
    + Default
    + Sum
    + Send
    + Sync
    + Serialize
    + DeserializeOwned
    + 'static
{
    /// Lossy conversion from `f64`; used for constants and ratios of counts.
    fn of(value: f64) -> Self {
        Self::from_f64(value).unwrap_or_else(Self::nan)
    }

    /// Ratio of two counts.
    fn ratio(numerator: u64, denominator: u64) -> Self {
        Self::of(numerator as f64) / Self::of(denominator as f64)
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}
