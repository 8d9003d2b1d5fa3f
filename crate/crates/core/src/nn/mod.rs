//! Trainable layers, the model container, architecture builders and the
//! `IBNL1` checkpoint format.

mod batchnorm;
pub mod checkpoint;
mod layers;
mod model;

pub use batchnorm::{
    batchnorm_backward_check, BatchNormState, BatchStats, BN_EPSILON, BN_MOMENTUM,
};
pub use layers::{dropout_forward, Activation, ConvState, DenseState};
pub use model::{
    build_fc_model, build_simple_cnn, CnnConfig, FcConfig, ForwardPass, Layer, Model,
    OutputActivation, CNN_CHANNELS,
};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::TensorError;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("batch norm in train mode needs at least 2 samples, got {0}")]
    BatchTooSmall(usize),
    #[error("layer expects {expected} features, got {got}")]
    FeatureMismatch { expected: usize, got: usize },
    #[error("dropout rate {0} outside [0, 1)")]
    DropoutRate(f64),
    #[error("invalid model configuration: {0}")]
    InvalidConfig(String),
    #[error("model has no batch norm directly before its output activation")]
    NoFinalBatchNorm,
    #[error("dropout in train mode needs a random source")]
    MissingRng,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Infer,
}
