//! Deterministic single-process federated learning simulator.
//!
//! [`nnkernel`] holds the small conv/dense networks, their gradients and the
//! Hessian and eigen tooling. [`datagen`] builds synthetic datasets and
//! non-IID partitions. [`fedcore`] runs rounds with an optional server-side
//! update, [`pruner`] plans and applies structured filter pruning, and
//! [`harness`] ties them into configured experiments with metrics on disk.

pub mod datagen;
pub mod error;
pub mod fedcore;
pub mod harness;
pub mod nnkernel;
pub mod pruner;
pub mod seed;

pub use error::{Error, Result};
