//! Hadamard low-rank quantized backpropagation for linear and convolution layers.

pub mod backprop;
pub mod costmodel;
pub mod error;
pub mod hadamard;
pub mod harness;
pub mod quantize;
pub mod tensor;

pub use error::{HlqError, Result};
pub use tensor::{LayerDims, Tensor};
