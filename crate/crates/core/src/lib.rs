//! Probabilistic cataloging of astronomical images.
//!
//! A generative model of multi-band images (stars and galaxies, Poisson pixel
//! counts) together with two approximate posterior inference engines:
//! annealed importance sampling with slice-sampling-within-Gibbs, and
//! structured variational inference optimized by a Newton trust-region block
//! coordinate ascent.

pub mod detect;
pub mod error;
pub mod harness;
pub mod jet;
pub mod kv;
pub mod mcmc;
pub mod model;
pub mod parallel;
pub mod patch;
pub mod posterior;
pub mod priors;
pub mod simulator;
pub mod vi;

pub use error::{Error, Result};
