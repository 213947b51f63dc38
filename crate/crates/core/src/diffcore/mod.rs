//! Dense tensors and reverse-mode differentiation.

mod gradcheck;
mod param;
mod tape;
mod tensor;

pub use gradcheck::{finite_difference_gradient, max_relative_error};
pub use param::{BufferId, ParamId, ParamSet};
pub use tape::{BatchStats, Gradients, Tape, Var, COSINE_EPS};
pub use tensor::Tensor;
