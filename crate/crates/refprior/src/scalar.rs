//! Scalar abstraction for the numerical core.
//!
//! The grid solvers and information-theoretic primitives are generic over the
//! floating-point type so the same code runs in `f32` or `f64`. Concrete
//! aliases for the `f64` instantiations live at the crate root; everything
//! downstream of the particle ensembles is pinned to `f64` because the
//! gradient checks need the headroom.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive};

/// Floating-point scalar usable by the channel/prior solvers.
pub trait Real:
    Float
    + FromPrimitive
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    /// Lifts an `f64` constant into this scalar type.
    ///
    /// Panics only if the constant is not representable, which for the
    /// literals used in this crate cannot happen.
    fn of(x: f64) -> Self {
        Self::from_f64(x).expect("constant must be representable")
    }

    /// Tolerance used when validating normalization invariants
    /// (distributions summing to one, stochastic rows, ...).
    fn validation_tol() -> Self;
}

impl Real for f64 {
    fn validation_tol() -> Self {
        1e-12
    }
}

impl Real for f32 {
    fn validation_tol() -> Self {
        1e-5
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constants_lift_exactly() {
        assert_eq!(f64::of(0.5), 0.5);
        assert_eq!(f32::of(0.25), 0.25f32);
    }

    #[test]
    fn validation_tol_tracks_precision() {
        assert!(f64::validation_tol() < 1e-9);
        assert!(f32::validation_tol() > f64::validation_tol() as f32);
    }
}
