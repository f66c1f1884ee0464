//! A small CNN inference engine with LASSO channel pruning for residual
//! segmentation networks, a parallel argmax head, cost accounting,
//! segmentation metrics and fisheye top-view stitching.
//!
//! Numeric types are generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below fix the common `f32` instantiations.

pub mod argmax;
pub mod bev;
pub mod error;
pub mod labels;
pub mod metrics;
pub mod nn;
pub mod prune;
pub mod rng;
pub mod scalar;
pub mod synth;
pub mod tensor;

pub use error::{Error, Result};
pub use labels::{LabelMap, IGNORE_LABEL};
pub use scalar::Scalar;
pub use tensor::{Shape, Tensor};

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type ModelGraph32 = nn::ModelGraph<f32>;
pub type ModelGraph64 = nn::ModelGraph<f64>;
pub type ConvFilter32 = nn::ConvFilter<f32>;
pub type ConvFilter64 = nn::ConvFilter<f64>;
pub type ResidualBlock32 = nn::ResidualBlock<f32>;
pub type BatchNormParams32 = nn::BatchNormParams<f32>;
