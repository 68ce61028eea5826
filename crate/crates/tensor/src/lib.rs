//! Dense tensors and a reverse-mode gradient tape.
//!
//! Everything the filter-basis losses and the group-convolution networks
//! differentiate through lives here: cross-correlation and its adjoint,
//! pooling, batch normalization, cross-entropy, gathers and sparse linear
//! maps over image planes.

mod error;
pub mod gradcheck;
pub mod ops;
mod scalar;
mod sparse;
mod tape;
mod tensor;

pub use error::{Result, TensorError};
pub use ops::conv::Padding;
pub use ops::norm::{BatchNormMode, BatchNormStats};
pub use scalar::Scalar;
pub use sparse::SparseOperator;
pub use tape::{Gradients, Tape, Var};
pub use tensor::{permute_indices, strides, Tensor};
