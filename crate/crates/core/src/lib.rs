//! Function-space decentralized ADMM for federated learning over device graphs.
//!
//! Each device trains a small classifier on its own (label-skewed) data,
//! shares only its outputs on a public unlabeled set, and pulls its model
//! toward a per-sample *virtual target* (neighbor-mean output minus a stored,
//! scaled Lagrange multiplier) by knowledge distillation.
//!
//! The crate is `no_std` + `alloc`. The `std` feature (on by default) runs the
//! per-device step of every round on a rayon pool; results are identical to the
//! serial path because every device owns an independent seeded RNG stream.
//!
//! Modules:
//!
//! - [`graph`]: topologies and the degree / adjacency / Laplacian / incidence operators.
//! - [`nnmodel`]: an MLP prediction function with exact backprop for both losses.
//! - [`data`]: synthetic blobs, non-IID partitions and the shared probe set.
//! - [`fsadmm`]: the function-space ADMM round and the parameter/consensus baselines.
//! - [`dynamics`]: the linear output-dynamics model and its PI-style decomposition.
//! - [`metrics`], [`cost`]: accuracy/consensus metrics and byte accounting.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod cost;
pub mod data;
pub mod dynamics;
pub mod fsadmm;
pub mod graph;
pub mod linalg;
pub mod math;
pub mod metrics;
pub mod nnmodel;
pub mod rng;

pub use data::{Dataset, Partition, SharedSet};
pub use fsadmm::{Federation, HyperParams};
pub use graph::{GraphOperators, Topology};
pub use linalg::Matrix;
pub use nnmodel::{ModelSpec, ModelState};
