//! Dense `f64` tensors with eager reverse-mode differentiation.

mod gradcheck;
mod params;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, relative_error};
pub use params::{collect_grads, glorot_bound, glorot_uniform, linear, ParamStore, Sgd};
pub use tape::{concat, CustomOp, Gradients, Tape, Var, LAYER_NORM_EPS};
pub use tensor::Tensor;

#[cfg(test)]
mod tests;
