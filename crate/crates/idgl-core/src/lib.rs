//! Iterative deep graph learning: joint optimization of a graph structure
//! and the GCN that consumes it, with a linear-complexity anchor variant.
//!
//! The crate is organized bottom-up:
//!
//! * [`linalg`]: dense/CSR matrices and the matmul kernels (sequential and
//!   rayon-parallel backends that produce bit-identical results).
//! * [`autodiff`]: a tape of matrix-valued operations with reverse-mode
//!   differentiation; every graph-learning iteration of a forward pass lives
//!   on one tape.
//! * [`graph_construction`]: kNN initial graphs, symmetric normalization and
//!   edge perturbations for robustness experiments.
//! * [`graph_learner`]: multi-head weighted cosine metric, epsilon
//!   sparsification and graph mixing.
//! * [`message_passing`]: GCN layers over mixed dense/sparse adjacencies and
//!   the anchor-based two-hop propagation that avoids n x n products.
//! * [`regularization`]: smoothness, connectivity and sparsity penalties on
//!   learned graphs.
//! * [`trainer`]: the iterative forward pass, Adam, and the fit/evaluate
//!   loop.
//! * [`data_io`]: dataset loading, splits and synthetic generators.
//! * [`gradcheck`]: finite-difference verification of the backward pass.

pub mod autodiff;
pub mod data_io;
pub mod gradcheck;
pub mod error;
pub mod graph_construction;
pub mod graph_learner;
pub mod message_passing;
pub mod regularization;
pub mod trainer;
pub mod linalg;

pub use error::{IdglError, Result};
