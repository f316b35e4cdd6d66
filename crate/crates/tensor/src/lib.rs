//! Minimal CPU tensor library with tape-based reverse-mode autodiff.
//!
//! Tensors are dense, row-major and generic over [`Scalar`] (`f32` for
//! training, `f64` for gradient checks). Every differentiable op records a
//! backward closure on the output when any input is tracked; call
//! [`Tensor::backward`] on a scalar loss to accumulate gradients into leaf
//! parameters.
//!
//! ```
//! use bridgekit_tensor::Tensor;
//!
//! let w = Tensor::<f64>::from_vec(vec![2.0], &[1]).unwrap().into_param();
//! let loss = w.square().sum();
//! loss.backward().unwrap();
//! assert_eq!(w.grad().unwrap(), vec![4.0]);
//! ```

pub mod checkpoint;
mod conv;
mod error;
pub mod gradcheck;
pub mod nn;
mod norm;
mod ops;
pub mod optim;
mod scalar;
mod tensor;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointEntry};
pub use error::{Result, TensorError};
pub use nn::{attention, time_embedding, time_embedding_batch, Conv3d, GroupNorm, Linear, Module};
pub use optim::{Optimizer, OptimizerConfig, OptimizerKind};
pub use scalar::Scalar;
pub use tensor::{grad_enabled, no_grad, NoGradGuard, Tensor};
