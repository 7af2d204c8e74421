//! Dense tensors, the differentiation tape, and gradient verification.

mod gradcheck;
mod tape;
mod tensor;

pub use gradcheck::{finite_diff_check, GradCheck};
pub use tape::{Tape, Var};
pub use tensor::Tensor;
