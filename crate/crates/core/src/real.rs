//! Scalar abstraction for the pure math in this crate.
//!
//! Scoring and calibration formulas are written once, generically, and work
//! for any IEEE float. The rest of the crate (search, wire formats, traces)
//! pins [`crate::Scalar`] so files and tolerances stay well-defined.

use std::fmt::Debug;

use num_traits::{Float, FromPrimitive};

/// Floating-point scalar: `f32` or `f64`.
pub trait Real: Float + FromPrimitive + Debug + Send + Sync + 'static {
    /// Lossy conversion from `f64`, for mixing config constants into
    /// generic computations.
    fn from_f64_lossy(v: f64) -> Self;
}

impl Real for f32 {
    fn from_f64_lossy(v: f64) -> Self {
        v as f32
    }
}

impl Real for f64 {
    fn from_f64_lossy(v: f64) -> Self {
        v
    }
}

/// Convert a count into a scalar. Counts in this crate are small (token and
/// word counts), far below any float's exact-integer range.
pub(crate) fn count_to_real<R: Real>(n: usize) -> R {
    R::from_usize(n).expect("count representable as float")
}
