//! Minimal dense tensor core with reverse-mode differentiation.
//!
//! Values are `f64` throughout. Build a [`Graph`] per forward pass, insert
//! parameters with [`Graph::param`], compose primitives, and call
//! [`Graph::backward`] on a scalar to obtain [`Gradients`] for every leaf that
//! requires them.

pub mod cases;
pub mod error;
mod gemm;
pub mod gradcheck;
pub mod graph;
pub mod io;
pub mod kernels;
mod tensor;

pub use error::{Result, TensorError};
pub use gradcheck::{finite_diff_check, GradCheckReport};
pub use graph::{CustomOp, Gradients, Graph, Var, GATHER_ZERO};
pub use io::{load_tensor, read_tensor, save_tensor, write_tensor, DType};
pub use kernels::conv::{conv2d, conv_transpose2d, ConvParams};
pub use kernels::resample::PoolKind;
pub use tensor::Tensor;
