//! Joint two-image state-space matching.
//!
//! The crate is organized bottom-up:
//!
//! - [`tensor`]: row-major arrays and a taped reverse-mode graph.
//! - [`ssm`]: selective scan, its time-invariant convolution form and the
//!   residual Mamba block.
//! - [`joint`]: the joint four-directional skip scan over an image pair, its
//!   inverse merge and the gated convolutional aggregator.
//! - [`matcher`]: encoder, coarse matching, windowed fine matching and
//!   sub-pixel refinement.
//! - [`supervision`]: synthetic warped pairs, ground truth, losses, training.
//! - [`analysis`]: token accounting and discrete receptive-field reachability.
//! - [`selftest`]: invariant suites runnable from the command line.

pub mod analysis;
pub mod config;
pub mod error;
pub mod gradcheck;
pub mod joint;
pub mod matcher;
pub mod params;
pub mod pgm;
pub mod selftest;
pub mod ssm;
pub mod supervision;
pub mod tensor;

pub use error::{Error, Result};
