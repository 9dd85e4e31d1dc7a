//! Dynamic detection head: scale-, spatial- and task-aware attentions over an
//! aligned feature pyramid, with reverse-mode gradients, an analytic cost
//! model and a toy detection harness.

pub mod attention;
pub mod checks;
pub mod error;
pub mod flops;
pub mod harness;
pub mod head;
pub mod pyramid;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{DType, Tape, Tensor, Var};
