//! Tensor operations with reverse-mode automatic differentiation.

mod conv;
mod gradcheck;
mod graph;
mod norm;

pub use conv::{conv2d_backward, conv2d_forward, ConvGrads, ConvSpec};
pub use gradcheck::{grad_check, grad_check_inputs, relative_error};
pub use graph::{Activation, Graph, LossKind, Pool, Var};
pub use norm::{BatchNormState, Mode};
