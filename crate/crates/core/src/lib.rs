//! Simulation of quantized convolutions on bit-scalable compute-in-memory
//! arrays, with column-wise weight and partial-sum quantization.

pub mod bitsplit;
pub mod cim_conv;
pub mod cost_model;
pub mod data;
pub mod error;
pub mod quantizer;
pub mod seeds;
pub mod tensor;
pub mod tiler;
pub mod trainer;
pub mod variation;

pub use error::{Error, Result};
pub use tensor::Tensor;
