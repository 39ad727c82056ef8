//! Unsupervised dereverberation of monaural music recordings.
//!
//! The pipeline estimates per-band linear-prediction filters with WPE, treats the
//! resulting operator as a linear inverse problem, samples a dry estimate with a
//! diffusion restoration sampler under a pluggable prior, refines the filters
//! against that estimate, and samples again.

pub mod ddrm;
pub mod error;
pub mod evalkit;
pub mod linop;
pub mod pipeline;
pub mod prior;
pub mod refine;
pub mod rng;
pub mod spectral;
pub mod wpe;

#[cfg(test)]
mod testutil;

pub use error::{Error, Result, Stage};
