//! Gradient-guided diffusion sampling for chance constrained programs.
//!
//! The pipeline has three stages:
//!
//! 1. [`datagen`] solves a family of deterministic restricted problems and
//!    labels each solution with its empirical risk level.
//! 2. [`diffusion`] trains a risk-conditioned noise-prediction network on
//!    those pairs with classifier-free condition dropout.
//! 3. [`sampler`] runs the reverse process with objective-gradient
//!    [`guidance`] to draw low-cost, feasible solutions.
//!
//! [`baselines`] holds the exact cone reformulation used as an oracle, and
//! [`harness`] wires the stages together behind on-disk artifacts.

// `!(x > 0.0)` is used on purpose so NaN inputs are rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod baselines;
pub mod ccp;
pub mod datagen;
pub mod diffusion;
pub mod error;
pub mod guidance;
pub mod harness;
pub mod sampler;

pub use error::{Error, ErrorClass, Result};
