//! Reverse-mode automatic differentiation over dense `f64` tensors.

mod gradcheck;
mod kernels;
mod tape;
mod tensor;

pub use gradcheck::{finite_diff_check, finite_diff_check_many, relative_error, GradCheck, FD_STEP};
pub use kernels::default_groups;
pub use tape::{log_softmax_rows, Gradients, Mark, Tape, Var};
pub use tensor::Tensor;
