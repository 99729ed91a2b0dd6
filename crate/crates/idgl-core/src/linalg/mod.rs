//! Dense and sparse matrix primitives used by the rest of the crate.

pub mod dense;
pub mod kernels;
pub mod sparse;

pub use dense::{alloc_high_water, reset_alloc_high_water, Dense};
pub use sparse::CsrSparse;
