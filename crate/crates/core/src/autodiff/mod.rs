//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Tape`] records each primitive as it is evaluated. [`Tape::backward`]
//! then sweeps the record in reverse, accumulating gradients additively
//! across fan-out. Two nodes carry custom gradients: [`Tape::stop_gradient`]
//! (identity forward, zero backward) and [`Tape::straight_through_onehot`]
//! (hard one-hot forward, identity backward).

mod batchnorm;
mod gradcheck;
mod tape;

pub use batchnorm::{BatchNormState, BatchStats, BnMode, DEFAULT_EPSILON, DEFAULT_MOMENTUM};
pub use gradcheck::{
    grad_check, grad_check_against, relative_error, CoordinateError, GradCheckReport,
    REL_ERROR_FLOOR,
};
pub use tape::{argmax, onehot_rows, FrozenNodes, Gradients, Tape, Var};

#[cfg(test)]
mod tests;
