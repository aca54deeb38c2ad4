//! Depth estimation from per-pixel plane coefficients.
//!
//! This crate holds the algorithmic core: a reverse-mode autodiff engine over
//! dense `f64` arrays ([`diffcore`]), the pinhole/plane-coefficient geometry
//! ([`geometry`]), seed-pixel resampling with cascaded offsets and confidence
//! fusion ([`planarops`]), the training losses including the mean plane loss
//! ([`losses`]), a small two-head encoder–decoder ([`model`]), an Adam
//! optimizer ([`optim`]), a procedural piecewise-planar scene generator
//! ([`synthscenes`]) and the depth metric suite ([`metrics`]).
//!
//! The crate is `no_std`-compatible (requires `alloc`); IO, file formats and
//! the CLI live in the companion `planedepth-cli` crate.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod diffcore;
pub mod geometry;
pub mod losses;
pub(crate) mod math;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod planarops;
pub mod rng;
pub mod synthscenes;
pub mod tensor;

pub use diffcore::{DiffValue, Graph};
pub use tensor::Tensor;

/// Positivity floor for logarithm, reciprocal and square-root arguments.
pub const EPS_POS: f64 = 1e-8;

/// Floor applied to per-pixel norms before channel normalization.
pub const EPS_NORM: f64 = 1e-12;
