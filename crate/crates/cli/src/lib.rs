//! File formats, IO and the command line for the group cohesion pipeline.

pub mod annotations;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod error;
pub mod images;
pub mod manifest;
pub mod models;
pub mod pipeline;
pub mod synth;

pub use error::{Error, Result};
