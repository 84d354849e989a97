//! Reference priors for discrete-outcome models.
//!
//! The crate has two layers. The exact layer discretizes a one-parameter
//! model onto a grid ([`models`]), measures it ([`info`]), and solves for
//! maximally informative priors with multiplicative fixed-point iterations
//! ([`ba`]). The approximate layer represents a prior as a finite ensemble
//! of neural-network particles ([`nn`], [`particles`]) trained on
//! semi-supervised and transfer objectives over real datasets ([`data`]),
//! with a spectral embedding of the ensemble for inspection ([`embed`]).
//!
//! The numerical core is generic over the floating-point scalar; the aliases
//! below fix `f64`, which is what the particle layer and all shipped tools
//! use.

pub mod ba;
pub mod data;
pub mod embed;
pub mod error;
pub mod info;
pub mod models;
pub mod nn;
pub mod particles;
pub mod scalar;

pub use error::{Error, Result};
pub use scalar::Real;

/// `f64` instantiations of the generic core.
pub type Grid64 = models::ParameterGrid<f64>;
pub type Channel64 = models::DiscreteChannel<f64>;
pub type Dist64 = info::Distribution<f64>;
pub type Prior64 = ba::AtomPrior<f64>;
pub type Report64 = ba::BaReport<f64>;
pub type Embedding64 = embed::EmbeddingResult<f64>;
