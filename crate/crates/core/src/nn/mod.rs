//! Tensor and differentiation substrate.

mod kernels;
mod tape;
mod tensor;

pub use kernels::forward_conv;
pub use tape::{grad_of, sgd_step, sigmoid, Tape, Var};
pub use tensor::{ParamSet, Tensor};

#[cfg(test)]
mod tests;
