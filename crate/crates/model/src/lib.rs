//! Lead-time-conditioned residual convolutional forecaster with categorical
//! outputs, reverse-mode gradients, Adam training and Polyak averaging.

pub mod checkpoint;
pub mod config;
pub mod cube;
pub mod error;
pub mod network;
pub mod optim;
pub mod scalar;
pub mod tensor;

pub use config::{HeadSpec, ModelConfig};
pub use error::{ModelError, Result};
pub use network::{HeadTarget, Network};
pub use scalar::Scalar;
pub use tensor::Tensor;
