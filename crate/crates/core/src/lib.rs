//! Tensor engine, ViTamin-style image towers, contrastive training and
//! evaluation.

pub mod autograd;
pub mod container;
pub mod error;
pub mod eval;
pub mod kernels;
pub mod nn;
pub mod tensor;
pub mod train;
pub mod zoo;

pub use autograd::{Graph, Var};
pub use error::{Error, Result};
pub use tensor::{DType, Scalar, Tensor};
