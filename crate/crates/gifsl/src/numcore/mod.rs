//! Dense numeric primitives: matrices, parameter tensors, SGD with
//! momentum and gradient clipping, and the finite-difference oracle.

mod gradcheck;
mod matrix;
mod optim;

pub use gradcheck::{finite_diff_grad, max_rel_err, GRADCHECK_H, GRADCHECK_TOL};
pub use matrix::{dot, Matrix};
pub use optim::{sgd_step, OptimConfig, ParamTensor, DEFAULT_CLIP};
