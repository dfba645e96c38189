//! Multi-shot storyboard generation on a desk-scale flow-matching stack.
//!
//! This crate implements the full pipeline for generating short storyboards
//! (sequences of keyframe images sharing persistent characters) with a tiny
//! diffusion transformer trained from scratch:
//!
//! * a reverse-mode tape autodiff engine over dense `f32`/`f64` tensors
//!   ([`tensor`]),
//! * a deterministic linear patch codec standing in for a causal video VAE
//!   ([`codec`]),
//! * a procedurally generated glyph-storyboard dataset with exact oracle
//!   annotations ([`synth`]),
//! * a transformer that packs reference latents before shot latents, attends
//!   to text per-shot through block-isolated cross-attention, and encodes
//!   position with a three-axis rotary scheme ([`model`]),
//! * flow-matching training over three generation modes with an auxiliary
//!   role-attention consistency loss ([`train`], [`racl`]),
//! * a reference-free two-term guided Euler sampler ([`sample`]),
//! * a raw-video → storyboard extraction pipeline ([`pipeline`]),
//! * toy identity/style/alignment metrics and paired ablation studies
//!   ([`metrics`], [`studies`]).
//!
//! Everything is seeded explicitly and runs deterministically on one thread;
//! repeated runs with the same configuration produce byte-identical outputs.

pub mod codec;
pub mod error;
pub mod image;
pub mod metrics;
pub mod model;
pub mod pipeline;
pub mod racl;
pub mod rng;
pub mod sample;
pub mod studies;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
