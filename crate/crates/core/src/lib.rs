//! Simulator for robust, communication-efficient semi-supervised federated
//! learning.
//!
//! The server holds a small labeled set, clients hold unlabeled shards and
//! train on confident pseudo labels. Uploads can be quantized to `r` bits over
//! a symmetric clipping range, scored against the server's own update
//! (cosine similarity of historical sums plus a Gaussian 2-Wasserstein
//! distance), and aggregated with the geometric median. Label-flipping and
//! Gaussian poisoning attacks can be injected.

// `!(x > 0.0)` is how parameter checks reject NaN along with bad values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod rng;

pub mod aggregate;
pub mod attack;
pub mod data;
pub mod model;
pub mod quant;
pub mod selection;
pub mod sim;
pub mod sstrain;

pub use error::{Error, Result};
pub use model::ParamVector;
