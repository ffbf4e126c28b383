//! Reverse-mode automatic differentiation over dense `f64` tensors.

mod adam;
mod gradcheck;
mod kernels;
mod lstm;
mod ops;
mod params;
mod tape;
mod tensor;

pub use adam::{Adam, AdamConfig};
pub use gradcheck::{grad_check, GradCheck};
pub use lstm::{lstm_cell, lstm_step, LstmState};
pub use ops::Conv2dOpts;
pub use params::{BoundParams, ParamSet, SharedParams};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
