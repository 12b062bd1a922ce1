//! Floating-point-sound robustness verification for feed-forward,
//! convolutional and residual ReLU networks.
//!
//! The analysis propagates polyhedral lower/upper bounds (one linear
//! expression per neuron and polarity) and tightens them by backsubstitution
//! towards the input. Backsubstitution exploits the sparsity of
//! convolutional layers through dependence-set cuboids, stops rows early once
//! their neuron is provably stable, and processes rows in bounded chunks.

pub mod analyzer;
pub mod cli;
pub mod backsub;
pub mod decimal;
pub mod error;
pub mod gen;
pub mod interval;
pub mod depsets;
pub mod network;
pub mod oracle;

pub use error::{Error, Result};
pub use interval::{Endpoint, Interval, Rational, SoundnessMode};
