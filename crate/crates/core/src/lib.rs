//! Streaming ADL perception engine.
//!
//! The pipeline runs skeleton frames through a rolling window sampler
//! ([`stream`]), gates each window on its average joint motion ([`motion`]),
//! turns backbone features ([`features`]) into a 128-dimensional ADL embedding
//! with spatial mid-fusion ([`fusion`]), and estimates the user state (seen,
//! unseen or atypically performed ADL) against a per-user embedding space
//! ([`space`]). Decisions drive assistive events ([`assist`]); [`eval`] holds
//! the offline evaluation battery and [`pipeline`] wires everything together.

pub mod assist;
pub mod error;
pub mod eval;
pub mod features;
pub mod fusion;
pub mod motion;
pub mod pipeline;
pub mod space;
pub mod stream;
pub mod synth;
pub mod wire;

pub use error::{Error, Result};
