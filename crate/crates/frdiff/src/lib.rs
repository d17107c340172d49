//! Feature-reuse acceleration for diffusion sampling on a toy score network.
//!
//! The crate bundles:
//! - a small tape-based autodiff tensor library ([`tensor`]),
//! - noise schedules, toy score networks with an explicit S/f block split,
//!   DDPM training and DDIM sampling ([`schedule`], [`model`], [`train`],
//!   [`sampler`], [`data`]),
//! - the feature-reuse runtime: keyframe schedules, per-layer caches, score
//!   memory and score mixing ([`reuse`]),
//! - gradient-based keyframe search with straight-through gates ([`autofr`]),
//! - measurement instruments: temporal-change metric, radially averaged PSD,
//!   cost/speedup model, reduced-NFE equivalence verifier ([`analysis`]).

pub mod analysis;
pub mod autofr;
pub mod config;
pub mod data;
mod error;
pub mod io;
pub mod model;
pub mod reuse;
pub mod sampler;
pub mod schedule;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
