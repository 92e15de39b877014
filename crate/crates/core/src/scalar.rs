//! Scalar abstraction over `f32`/`f64`.
//!
//! Forward arithmetic runs in `f32` during training and inference. The
//! finite-difference oracle instantiates the same code at `f64` so that
//! numeric-vs-analytic comparisons measure formula errors, not truncation.

use std::fmt::{Debug, Display};

pub trait Real:
    num_traits::Float + num_traits::NumAssignOps + Default + Debug + Display + Send + Sync + 'static
{
    fn from_f64(x: f64) -> Self;
    fn as_f64(self) -> f64;

    /// Numerically safe logistic function.
    fn sigmoid(self) -> Self {
        let one = Self::one();
        if self >= Self::zero() {
            one / (one + (-self).exp())
        } else {
            let e = self.exp();
            e / (one + e)
        }
    }
}

impl Real for f32 {
    fn from_f64(x: f64) -> Self {
        x as f32
    }

    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    fn from_f64(x: f64) -> Self {
        x
    }

    fn as_f64(self) -> f64 {
        self
    }
}

/// Shorthand used all over the numeric code: `r::<R>(0.5)`.
#[inline]
pub fn r<R: Real>(x: f64) -> R {
    R::from_f64(x)
}
