//! Backsubstitution engine.
//!
//! A pass rewrites the affine expressions of one query layer backwards
//! through the network until the input layer. After every affine step the
//! expressions are concretized with the current bounds of the layer they now
//! range over and the best candidate per neuron is kept. Rows are independent
//! and are processed in parallel; each row's arithmetic happens in a fixed
//! order, so results do not depend on the number of workers.

pub mod matrix;
pub mod pass;
pub mod steps;

use crate::interval::Interval;

pub use matrix::{compact_rows, concretize, concretize_values, BoundMatrix, CandidateBound, Polarity, Row};
pub use pass::{run_backsubstitution, run_margin_pass, BacksubOptions, PassStats, DEFAULT_MEMORY_BUDGET};
pub use steps::{
    backsub_dense_step, backsub_relu_step, backsub_residual, gbc_step, init_bound_matrix, materialize_conv,
    step_through, ConvStrategy, StepContext,
};

/// Linear bounds `α·x + β <= relu(x) <= γ·x + δ` valid on a neuron's input
/// range.
#[derive(Clone, Debug, PartialEq)]
pub struct Relaxation<T> {
    pub alpha: Interval<T>,
    pub beta: Interval<T>,
    pub gamma: Interval<T>,
    pub delta: Interval<T>,
}
