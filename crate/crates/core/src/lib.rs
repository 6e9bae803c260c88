//! CResU-Net: a U-Net style encoder-decoder for breast-ultrasound lesion
//! segmentation, built on a small reverse-mode autodiff engine.
//!
//! The numeric core is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below fix the precision for the common cases.

pub mod autodiff;
pub mod blocks;
pub mod checkpoint;
pub mod checks;
pub mod config;
pub mod dataio;
pub mod error;
pub mod gradcheck;
pub mod metrics;
mod kernels;
pub mod model;
pub mod nn;
pub mod preprocess;
pub mod scalar;
pub mod tensor;
pub mod train;

pub use autodiff::{Activation, Gradients, Mode, OpKind, Padding, Tape, Var};
pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::{Shape, Tensor};

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Tape32 = Tape<f32>;
pub type Tape64 = Tape<f64>;
