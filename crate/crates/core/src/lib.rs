//! Spherical-coordinate KV cache compression with rate–distortion retention.
//!
//! Keys are stored as quantized hyperspherical angles plus a radius, grouped in
//! tier-homogeneous pages, and attention logits are computed directly from the
//! angle codes.

pub mod bits;
pub mod codec;
pub mod config;
pub mod controller;
pub mod decode;
pub mod error;
pub mod frontier;
pub mod meter;
pub mod snapshot;
pub mod stability;
pub mod store;
pub mod workload;

pub use error::{Result, SphKvError};
