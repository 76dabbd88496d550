//! Diffusion bridge networks for ensemble compression.
//!
//! A deep ensemble of classifiers is replaced by one source member plus a small
//! score network that transports the source logit to the ensemble logit along a
//! Gaussian diffusion bridge. After progressive distillation the bridge runs in
//! a single step, so prediction costs one classifier forward pass plus one
//! lightweight network evaluation per bridge.

pub mod bridge;
pub mod cost;
pub mod data;
pub mod distill;
pub mod error;
pub mod gradcheck;
pub mod logit;
pub mod metrics;
pub mod pipeline;
pub mod nn;
pub mod real;
pub mod inference;
pub mod score;
pub mod teacher;
pub mod training;

pub use error::{Error, Result};
pub use real::Real;
