//! Minimal dense-tensor differentiable compute.
//!
//! Networks are ordered stacks of [`LayerSpec`] layers operating on
//! `[channels, time]` tensors. A forward pass returns a [`Trace`] holding the
//! activations needed for an exact reverse pass; [`Network::backward`]
//! consumes it and accumulates parameter gradients. Everything is generic over
//! [`Scalar`] so the same code trains in `f32` and is gradient-checked in `f64`.

mod checkpoint;
mod error;
mod gradcheck;
mod layer;
mod network;
mod optim;
mod scalar;
mod tensor;

pub use checkpoint::{read_checkpoint, write_checkpoint, Checkpoint, CheckpointRecord};
pub use error::{Error, Result};
pub use gradcheck::{grad_check, GradCheckReport};
pub use layer::{Layer, LayerSpec, Padding};
pub use network::{Network, Trace};
pub use optim::{clip_grad_norm, Optimizer, OptimizerKind};
pub use scalar::Scalar;
pub use tensor::{Parameter, Tensor};

/// Row-wise L2 normalization with its vector-Jacobian product.
pub mod norm;
