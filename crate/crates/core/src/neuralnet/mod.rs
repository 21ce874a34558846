//! Minimal reverse-mode autodiff engine over NCHW tensors.
//!
//! A [`Graph`] records one forward pass; [`Graph::backward`] walks it in
//! reverse creation order. Parameters live in a [`ParamStore`] and enter a
//! graph through [`Graph::param`]. The engine is generic over [`Real`] so the
//! same network runs in `f32` for training and `f64` for gradient checks.

mod checkpoint;
mod gradcheck;
mod graph;
mod kernels;
mod optim;
mod params;
mod tensor;


pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, store_tensors, NamedTensor,
    CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use gradcheck::{grad_check, relative_error, GradCheckConfig, GradCheckEntry, GradCheckReport};
pub use graph::{BnUpdate, Grads, Graph, Mode, Padding, Var, BN_EPS};
pub use optim::{Optimizer, OptimizerState};
pub use params::{BatchNorm2d, Conv2d, ConvBlock, Param, ParamStore, BN_MOMENTUM};
pub use tensor::{Real, Tensor};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NnError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("convolution output size is not integral")]
    NonIntegralOutput,
    #[error("label {0} out of range")]
    LabelOutOfRange(u8),
    #[error("backward needs a scalar, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("i/o: {0}")]
    Io(String),
}

pub type Result<T> = std::result::Result<T, NnError>;
