//! Dense f64 tensors and tape-based reverse-mode automatic differentiation.
//!
//! The engine is deliberately small: rank-0/1/2 tensors, the dozen primitives
//! the training objectives need, and flat named parameter vectors with exact
//! blend/distance algebra. All state is f64 and all reductions run in a fixed
//! order, so repeated runs are bitwise identical.

mod numcheck;
mod opt;
mod params;
mod tape;
mod tensor;

pub use numcheck::finite_difference_gradient;
pub use opt::AdamW;
pub use params::{blend_params, param_distance, ParamLayout, ParamVector};
pub use tape::{grad, Tape, Var};
pub use tensor::Tensor;

pub(crate) use tensor::kernels;
