//! Dense arithmetic, activations, optimization and verification helpers
//! shared by the rest of the crate.
//!
//! Everything here works in `f64`. Gradient checks compare analytic
//! backward passes against central differences, which needs more headroom
//! than `f32` offers.

mod adam;
mod finite_diff;
mod matrix;
mod ops;
mod rng;

pub use adam::{adam_step, AdamState};
pub use finite_diff::{finite_diff_grad, max_relative_error, relative_error, DEFAULT_FD_STEP};
pub use matrix::Matrix;
pub use ops::{activations, relu, sigmoid, softmax_in_place, softmax_rows, Activation};
pub use rng::Rng;
