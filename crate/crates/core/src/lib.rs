//! Desk-scale MU-MIMO CSI feedback laboratory.
//!
//! The crate covers the full loop: synthetic clustered channels with
//! UL/DL angular-delay reciprocity, spatial-frequency <-> angular-delay
//! transforms, the latest-TypeII codebook quantizer, a learned feedback
//! autoencoder with a position-filling decoder, two-stage training, and
//! zero-forcing sum-rate evaluation of every scheme over one yardstick.

pub mod angular;
pub mod bits;
pub mod channelgen;
pub mod cmat;
pub mod csinet;
pub mod error;
pub mod harness;
pub mod mueval;
pub mod rng;
pub mod tensorkit;
pub mod training;
pub mod typeii;

pub use error::{Error, Result};
