use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive};

/// Floating-point scalar the numeric core is generic over (`f32` or `f64`).
///
/// Everything numeric in this crate is written against this trait; the
/// crate root exposes `f64` type aliases for the common case.
pub trait Scalar: Float + FromPrimitive + Sum + Debug + Display + Send + Sync + 'static {
    /// Lossy cast from `f64`. Total for IEEE targets.
    #[inline]
    fn cast(v: f64) -> Self {
        Self::from(v).expect("f64 -> Scalar cast")
    }

    /// Lossy cast to `f64`.
    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().expect("Scalar -> f64 cast")
    }

    /// Exact for counts below 2^24 (f32) / 2^53 (f64), which covers any
    /// cohort size this crate handles.
    #[inline]
    fn from_count(n: usize) -> Self {
        Self::cast(n as f64)
    }

    #[inline]
    fn two() -> Self {
        Self::one() + Self::one()
    }

    #[inline]
    fn half() -> Self {
        Self::cast(0.5)
    }
}

impl<T> Scalar for T where T: Float + FromPrimitive + Sum + Debug + Display + Send + Sync + 'static {}

/// Numerically stable logistic function, clamped to the open interval (0, 1)
/// so downstream log-loss and hessian terms stay finite.
#[inline]
pub fn sigmoid<S: Scalar>(margin: S) -> S {
    let p = if margin >= S::zero() {
        S::one() / (S::one() + (-margin).exp())
    } else {
        let e = margin.exp();
        e / (S::one() + e)
    };
    let hi = S::one() - S::epsilon() * S::half();
    p.max(S::min_positive_value()).min(hi)
}

/// Inverse of [`sigmoid`] on (0, 1).
#[inline]
pub fn logit<S: Scalar>(p: S) -> S {
    (p / (S::one() - p)).ln()
}
