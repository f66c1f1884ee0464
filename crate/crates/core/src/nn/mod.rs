//! Layers, the ENet-style architecture builder, model files and cost accounting.

pub mod bn;
pub mod block;
pub mod conv;
pub mod cost;
pub mod graph;
pub mod io;
pub mod train;

pub use bn::{fold_batchnorm, BatchNormParams};
pub use block::{block_forward, maxpool_pad, Middle, ResidualBlock, Skip, StageTag};
pub use conv::{conv_backward, conv_forward, factorized_conv_forward, ConvFilter, ConvGrads};
pub use cost::{count_cost, CostOptions, CostReport, LayerCost, MacConvention};
pub use graph::{build_enet_mini, upsample_nearest, Layer, ModelGraph, Node};
pub use io::{decode_model, encode_model, load_model, save_model, EncodedModel};
pub use train::{cross_entropy, dataset_loss, loss_and_grads, ParamGrad};
