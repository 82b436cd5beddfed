//! StyleLess: Gram-matrix style analytics and style-suppressing residual
//! layers for convolutional segmentation networks, built on a small
//! reverse-mode autodiff engine.

pub mod autodiff;
pub mod checkpoint;
pub mod error;
pub mod eval;
pub mod filters;
pub mod gradcheck;
mod kernels;
pub mod model;
pub mod nn;
pub mod stls;
pub mod style;
pub mod styleless;
pub mod tensor;
pub mod train;
pub mod toyscenes;
pub mod viz;

pub use autodiff::{Gradients, Primitive, Tape, Var};
pub use error::{Error, Result};
pub use tensor::{DType, Scalar, Tensor};
