//! Domain-specific green-list watermarking for small autoregressive language
//! models.
//!
//! The crate covers the full pipeline: corpus and vocabulary tooling
//! ([`corpus`]), a fixed-window neural LM with hand-written backprop and
//! portable checkpoints ([`lm`]), green-list watermark biasing and seeded
//! sampling ([`watermark`]), green-excess detection with deduplication and a
//! multi-query fingerprinting protocol ([`detector`]), watermark distillation
//! with utility regularization ([`distill`]), and a deterministic experiment
//! harness emitting CSV/SVG ([`experiments`]).
//!
//! Everything is deterministic given explicit seeds: integer mixing is done
//! modulo 2^64, floats are IEEE-754 doubles, and parallel code reduces in a
//! fixed order, so results are bit-identical across platforms and thread
//! counts.

#![allow(clippy::needless_range_loop)]

pub mod corpus;
pub mod detector;
pub mod distill;
pub mod experiments;
pub mod lm;
pub mod par;
pub mod rng;
pub mod stats;
pub mod watermark;

mod error;

pub use error::Error;

pub type Result<T> = std::result::Result<T, Error>;
