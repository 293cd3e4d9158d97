#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod cli;
pub mod clustering;
pub mod data;
pub mod diagnostics;
pub mod error;
pub mod kernels;
pub mod model;
pub mod objective;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
