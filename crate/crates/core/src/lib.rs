// `!(x > 0.0)` is how NaN-rejecting checks are spelled throughout.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autograd;
pub mod binarize;
pub mod bitkernel;
pub mod data;
pub mod error;
pub mod models;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::{ConvGeometry, Real, Tensor};
