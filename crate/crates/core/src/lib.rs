// Validation uses `!(x >= lo)` on purpose so NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod data;
pub mod error;
pub mod grad;
pub mod loss;
pub mod metrics;
pub mod nn;
pub mod reparam;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::{DType, Element, Tensor};
