//! SE-Inception-DenseNet micro-engine.
//!
//! A self-contained deep-learning stack: dense tensors with reverse-mode
//! automatic differentiation, the convolutional layer set, squeeze-and-
//! excitation recalibration, the SE-Inception dense/transition blocks, the
//! joint softmax + center-loss training procedure, and biometric
//! verification metrics.

pub mod blocks;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod init;
pub mod layers;
pub mod metrics;
pub mod model;
pub mod params;
pub mod se;
pub mod suite;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Result, SeidError};
pub use tensor::{Shape, Tensor};
