//! Simulated distributed full-graph GCN training with low-bit halo exchange.
//!
//! Each partition worker runs on its own thread and exchanges the embeddings
//! (forward) and feature gradients (backward) of its halo nodes through an
//! in-process transport. Exchanged rows are compressed to `b`-bit codes with
//! stochastic rounding and recovered unbiasedly on the receiving side.
//! Training runs either synchronously, or pipelined with communication
//! results consumed one epoch later, optionally with a forced synchronous
//! epoch every `k` epochs to bound staleness.

pub mod codec;
pub mod dataset;
pub mod error;
pub mod experiment;
pub mod graph;
pub mod linalg;
pub mod rng;
pub mod sbm;
pub mod trainer;
pub mod transport;

pub use error::{Error, Result};
