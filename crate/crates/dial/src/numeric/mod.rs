//! Low-level numerics: matrices, RNG streams, column statistics.

pub mod matrix;
pub mod rng;
pub mod stats;

pub use matrix::Matrix;
pub use rng::{derive_seed, RngStream};
pub use stats::{column_mean_var, column_median_mad, log_softmax_rows, softmax_rows};
