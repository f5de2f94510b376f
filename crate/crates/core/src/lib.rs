//! Structured pruning and adversarial robustness for small convolutional
//! networks, on top of a self-contained reverse-mode autodiff engine.

pub mod attacks;
pub mod autodiff;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod experiment;
mod kernels;
pub mod metrics;
pub mod network;
pub mod optim;
pub mod pruning;
pub mod seed;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
