//! Generative federated prototype learning.
//!
//! Clients summarise each class of their extracted features as a
//! diagonal-covariance Gaussian mixture, the server fuses mixtures across
//! clients by thresholded Bhattacharyya clustering, and clients sample
//! class-balanced pseudo-features from the fused mixtures to retrain the
//! classifier and ETF projection heads of a dual-classifier network.
//! FedAvg, FedProto and local-only baselines run on the same simulator,
//! and every exchanged scalar is counted in a communication ledger.
//!
//! The crate is `no_std` (it needs `alloc`). File IO, configuration files
//! and the command line live in the `gfpl-sim` crate.

#![no_std]
#![deny(unsafe_code)]
// `!(x > 0.0)` deliberately rejects NaN
#![allow(clippy::neg_cmp_op_on_partial_ord)]

extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod data;
pub mod error;
pub mod etf;
pub mod federation;
pub mod fusion;
pub mod gmm;
pub mod model;
pub mod numerics;
pub mod wire;

pub use error::{Error, Result};
