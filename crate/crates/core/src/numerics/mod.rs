//! Dense 64-bit arrays with reverse-mode automatic differentiation.

mod array;
pub mod gradcheck;
mod tensor;

pub use array::{Array, Grads, Leaves, ParamSet};
pub use gradcheck::{finite_difference_check, GradCheckOptions, GradCheckReport};
pub use tensor::{gelu_grad_scalar, gelu_scalar, logsumexp_with_weights, Tensor};
