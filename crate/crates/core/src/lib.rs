//! Kernel logistic regression on multilevel circulant matrices.
//!
//! The kernel matrix is replaced by a multilevel circulant approximation built from a
//! regular lattice, so every Newton direction costs a couple of multidimensional FFTs
//! instead of a dense solve. [`klr_fast`] holds the solver, [`dense_oracle`] the exact
//! O(n³) baseline, and [`multiclass`] the one-vs-all wrapper.

pub mod data_io;
pub mod dense_oracle;
pub mod error;
pub mod kernel;
pub mod klr_fast;
pub mod mcm;
pub mod metrics;
pub mod multiclass;
pub mod tensor_fft;

pub use error::{KlrError, Result};
