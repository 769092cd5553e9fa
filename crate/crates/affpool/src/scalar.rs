//! Scalar abstraction for everything numeric.
//!
//! Geometry, losses, the network, and the optimizer are generic over
//! [`Scalar`] so the pipeline runs in `f32` while gradient checks and
//! oracle tests instantiate the same code in `f64`.

use num_traits::{Float, NumAssignOps};

/// Floating-point element type (`f32` or `f64`).
pub trait Scalar:
    Float
    + NumAssignOps
    + std::fmt::Debug
    + std::fmt::Display
    + std::iter::Sum
    + Default
    + Send
    + Sync
    + serde::Serialize
    + serde::de::DeserializeOwned
    + 'static
{
    /// Type tag recorded in checkpoints ("f32" / "f64").
    const DTYPE: &'static str;

    fn from_f64(v: f64) -> Self;

    fn to_f64(self) -> f64;

    fn from_count(v: usize) -> Self {
        Self::from_f64(v as f64)
    }
}

impl Scalar for f32 {
    const DTYPE: &'static str = "f32";

    fn from_f64(v: f64) -> Self {
        v as f32
    }

    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    const DTYPE: &'static str = "f64";

    fn from_f64(v: f64) -> Self {
        v
    }

    fn to_f64(self) -> f64 {
        self
    }
}
