//! Minimal dense-tensor engine with reverse-mode differentiation. The
//! primitive set is exactly what the model's forward pass needs.

mod check;
mod tape;
mod tensor;

pub use check::{grad_check, grad_check_with};
pub use tape::{Tape, TensorId};
pub use tensor::Tensor;
