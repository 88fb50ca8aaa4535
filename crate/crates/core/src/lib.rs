pub mod autodiff;
pub mod data;
pub mod error;
pub mod model;
pub mod nn;
pub mod probe;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{DType, Scalar, Tensor};
