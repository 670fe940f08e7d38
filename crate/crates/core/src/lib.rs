//! Numerical laboratory for self-interacting diffusions on the circle.
//!
//! The crate computes the linear-response operators attached to an
//! equilibrium `μ*` of `μ ↦ ξ(Vμ)λ`, the covariance of the Gaussian limit
//! of the rescaled occupation measure, and checks those predictions
//! against Monte Carlo simulation of the history-dependent SDE
//! `dX = dB − ½∂_θ(Vμ_t)(X) dt`.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod basis;
pub mod dynamics;
pub mod error;
pub mod harness;
pub mod kernels;
pub mod measure;
pub mod operators;
pub mod ou;
pub mod quadrature;
pub mod seed;
pub mod stats;

pub use error::{Error, Result};
