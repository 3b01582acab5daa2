//! Minimal CPU neural-network kernel: convolution, batch normalization, ReLU,
//! 2×2 max pooling, a frame-wise dense head and binary cross-entropy, each
//! with a hand-written backward pass.

mod checkpoint;
mod layers;
mod loss;
mod model;
mod tensor;

use thiserror::Error;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, CheckpointError};
pub use layers::{
    conv2d_backward, conv2d_forward, maxpool2x2_backward, maxpool2x2_forward, relu_backward, relu_forward,
    BatchNorm2d, Conv2d, ConvGrads, MaxPool2x2, Mode, Param, Relu, BN_EPS, BN_MOMENTUM,
};
pub use loss::{bce_loss, bce_with_logits, sigmoid, PROB_CLAMP};
pub use model::{dense_head_backward, dense_head_forward, output_frames, Architecture, FramePosteriors, Layer, Model, BLOCK_CHANNELS, TIME_POOLING};
pub use tensor::Tensor;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum NnError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("batch norm in train mode needs more than one value per channel")]
    BatchNormSingleton,
    #[error("backward called without a preceding train-mode forward")]
    NoForwardCache,
}
