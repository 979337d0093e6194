//! Dense tensors and a reverse-mode tape.
//!
//! Values are plain [`Tensor`]s. Anything that needs a gradient is recorded
//! on a [`Tape`] and addressed through a [`Var`] handle; [`Tape::backward`]
//! consumes the tape and returns the gradient of every trainable leaf.

mod tape;
mod tensor;

pub use tape::{fast_tanh, Gradients, Tape, Var};
pub use tensor::{Tensor, TensorError};
