//! Dense tensors and a reverse-mode differentiation tape.

mod gradcheck;
mod tape;
mod tensor;

pub use gradcheck::{finite_diff_check, GradCheckReport};
pub use tape::{Gradients, Tape, Var};
pub use tensor::{DType, Scalar, Tensor};
