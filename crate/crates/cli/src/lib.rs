//! Configuration, matrix file formats and mode orchestration behind the `depca` binary.

// `!(x >= 0.0)` also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod error;
pub mod matrix_io;
pub mod run;

pub use error::{CliError, Result};
