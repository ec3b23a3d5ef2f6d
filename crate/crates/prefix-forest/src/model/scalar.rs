//! Scalar abstraction so the reference model runs at f32 or f64. All
//! verification uses f64; the f32 mode exists for realism reporting with a
//! relaxed tolerance.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::AddAssign;

use ndarray::{LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive};

pub trait Scalar:
    Float
    + FromPrimitive
    + LinalgScalar
    + ScalarOperand
    + AddAssign
    + Sum
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    fn from_f64_lossy(v: f64) -> Self {
        Self::from_f64(v).expect("finite f64 converts to any float scalar")
    }

    fn to_f64_lossy(self) -> f64 {
        self.to_f64().expect("float scalar converts to f64")
    }

    /// Denominator floor for relative gradient errors: a few decades above
    /// machine epsilon, so rounding dust on near-zero coordinates does not
    /// dominate the report.
    fn rel_floor() -> f64;
}

impl Scalar for f32 {
    fn rel_floor() -> f64 {
        1e-5
    }
}

impl Scalar for f64 {
    fn rel_floor() -> f64 {
        1e-12
    }
}
