//! Reverse-mode differentiable tensors with the handful of layers a small
//! two-stream regression CNN needs: (depthwise/pointwise) convolution, 2x2
//! max pooling, dense layers, ReLU/PReLU, dropout, orthogonal initialization
//! and Adam.
//!
//! Values are `f32` for training; every op is generic over [`Element`] so the
//! same graph can be evaluated in `f64` for finite-difference checks.

mod checkpoint;
mod error;
mod gradcheck;
mod init;
mod kernels;
mod optim;
mod tape;
mod tensor;

pub use checkpoint::{read_checkpoint, write_checkpoint, CHECKPOINT_MAGIC};
pub use error::{NnError, Result};
pub use gradcheck::grad_check;
pub use init::orthogonal_init;
pub use optim::{adam_step, AdamState};
pub use tape::{Gradients, Tape, Var};
pub use tensor::{Element, Tensor};
