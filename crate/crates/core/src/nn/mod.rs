//! Minimal neural-network layers with hand-written backward passes.

pub mod activation;
pub mod conv;
pub mod norm;
pub mod param;
pub mod pool;
pub mod sequential;
pub mod shuffle;

use thiserror::Error;

use crate::tensor::TensorError;

pub use activation::PRelu;
pub use conv::Conv2d;
pub use norm::{BatchNorm2d, BnCache};
pub use param::{Param, ParamKind, Parameterized};
pub use sequential::{FrozenNet, Layer};
pub use shuffle::{pixel_shuffle, pixel_unshuffle};

/// Batch-norm behaviour: batch statistics (`Train`) or running statistics (`Eval`).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NnError {
    #[error("{layer}: expected {expected} input channels, got {got}")]
    ChannelMismatch {
        layer: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("pixel shuffle needs a channel count divisible by 4, got {0}")]
    ShuffleChannels(usize),
    #[error("pixel unshuffle needs even spatial dimensions, got {0}x{1}")]
    UnshuffleSize(usize, usize),
    #[error("{layer}: weight size {got} does not match expected {expected}")]
    WeightShape {
        layer: String,
        expected: usize,
        got: usize,
    },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}
