//! Group-cohesion estimation from faces and scenes.
//!
//! This crate is `no_std` (with `alloc`) and carries every numeric piece of
//! the pipeline: a tape-based reverse-mode differentiation engine, a capsule
//! network for seven-class facial emotion, the statistic-pooled face-level
//! cohesion head, the image-level single- and multi-task heads, optimizers
//! and the training loop, inter-rater agreement statistics, and a
//! deterministic synthetic data generator. File formats, image decoding and
//! the command-line tool live in the `cohesion` crate.

#![no_std]
#![forbid(unsafe_code)]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod annotation;
pub mod capsnet;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod heads;
pub mod nn;
pub mod real;
pub mod rng;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use graph::{Graph, Var};
pub use real::Real;
pub use tensor::Tensor;
