//! Graph neural network training on compressed sketch state.
//!
//! The library keeps per-layer node representations as count sketches of the
//! feature matrix, pushes graph convolutions through precomputed two-sided
//! sketches of the convolution matrix, and evaluates nonlinearities as learned
//! polynomials via tensor sketches, so an epoch of training touches state whose
//! size depends on the sketch dimension `c` rather than the node count `n`.
//! Hash tables are data-dependent (SimHash over node representations) and are
//! refined during training on a small, gradient-selected subset of nodes.
//!
//! Top-level layout:
//! - [`linalg`]: dense/CSR/complex matrices, row FFTs, binary serialization.
//! - [`sketch`]: count sketches, tensor sketches, two-sided convolution
//!   sketches, basis changes between hash tables, median unsketching.
//! - [`lsh`]: SimHash projections, bucket directories, triplet-loss hash
//!   learning, update-set selection, and class tables for sparse loss
//!   evaluation.
//! - [`pts`]: polynomial activation coefficients and dense references.
//! - [`model`]: sketched GCN/GraphSAGE/GAT layers, persistent sketch state,
//!   dense inference.
//! - [`train`]: reverse-mode tape over the fixed op set, Adam, the sketched
//!   training loop, and the dense full-graph baseline trainer.
//! - [`data`]: dataset directory format, SBM generator, Cora converter,
//!   adjacency normalization, preprocessing into a sketch cache.
//! - [`config`]: run configuration (key=value files + CLI overrides).
//! - [`verify`]: the self-check registry behind `sketchgraph verify`.
//! - [`bench`]: the size-sweep harness behind `sketchgraph bench`.

pub mod bench;
pub mod config;
pub mod counters;
pub mod data;
pub mod error;
pub mod linalg;
pub mod lsh;
pub mod model;
pub mod pts;
pub mod seeds;
pub mod sketch;
pub mod train;
pub mod verify;

pub use error::{SgError, SgResult};
