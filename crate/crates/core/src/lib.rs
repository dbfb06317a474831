//! Linear non-Gaussian components with a learned linear + energy dependency structure.
//!
//! The sources are modelled as conditionally Gaussian with a random precision
//! matrix built as the Laplacian of a randomly weighted graph. Integrating the
//! weights out (after bounding the determinant from below) gives an
//! unnormalized density parametrized by a symmetric dependency matrix `M`:
//!
//! ```text
//! log p(s) = -sum_i m_ii |s_i| - sum_{i<j} m_ij |s_i - s_j| + const
//! ```
//!
//! `W` and `M` are estimated jointly by score matching. For fixed `W` the
//! objective is a quadratic form in the upper-triangular vector of `M`, which
//! is minimized exactly under non-negativity and row-dominance constraints;
//! `W` is updated by projected gradient steps on the unit-row sphere.
//!
//! Module map:
//!
//! * [`genmodel`]: the hierarchical generative model and synthetic datasets.
//! * [`density`]: the approximate densities and the `g` nonlinearities.
//! * [`scorematch`]: the score-matching objective, its gradient and quadratic form.
//! * [`qpsolve`]: the constrained quadratic program for the dependency matrix.
//! * [`estimator`]: ICA initialization and the alternating estimation loop.
//! * [`preprocess`]: DC removal, norm rescaling and PCA whitening.
//! * [`eval`]: performance matrices, Amari index, dependency errors, density
//!   comparisons and MDS.

// `!(x >= 0.0)` also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod density;
pub mod error;
pub mod estimator;
pub mod eval;
pub mod genmodel;
pub mod index;
pub mod preprocess;
pub mod qpsolve;
pub mod rng;
pub mod scorematch;

pub use error::{Error, Result};

/// Sample-major data: one observation per row.
pub type DataMatrix = nalgebra::DMatrix<f64>;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
