//! Minimal reverse-mode automatic differentiation over dense `f64` tensors.

mod adam;
mod tape;
mod tensor;

pub use adam::{lr_schedule, AdamState};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
