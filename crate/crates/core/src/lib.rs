//! Traffic density classification with stack-driven continual retraining.
//!
//! The crate is organized bottom-up:
//!
//! - [`micronet`]: a small CNN engine (forward/backward, SGD, frozen-base
//!   fine-tuning, checkpoints), generic over the scalar type.
//! - [`datasets`]: labels, corpus loading, stratified splits, augmentation
//!   and a synthetic highway-scene generator.
//! - [`refeed`]: the misclassification stack, the accuracy gate, gain metrics
//!   and the offline/online training procedure built on them.
//! - [`prediction`]: prediction records, human review and continuous
//!   retraining cycles.

pub mod datasets;
pub mod error;
pub mod micronet;
pub mod prediction;
pub mod refeed;
mod scalar;

pub use error::{Error, ErrorClass, Result};
pub use scalar::Scalar;

/// Number of traffic density classes.
pub const CLASS_COUNT: usize = 4;

pub type Tensor = micronet::Tensor<f64>;
pub type Tensor32 = micronet::Tensor<f32>;
pub type MicroCnn = micronet::Model<f64>;
pub type MicroCnn32 = micronet::Model<f32>;
pub type Gradients = micronet::Gradients<f64>;
