//! A small, deterministic, CPU-only differentiable compute core.
//!
//! Everything is `f64`. A [`Tape`] records a dynamic graph during the
//! forward pass and replays it in reverse to produce gradients. Trainable
//! weights and non-trainable buffers (batch-norm running statistics) live in
//! a named [`Params`] store that is separate from any one tape, so a frozen
//! store can be shared across threads for inference while each thread owns
//! its own tape.
//!
//! Layers ([`layers`]) are thin structs holding [`ParamId`]s; they never own
//! tensors themselves.

pub mod error;
pub mod gradcheck;
mod kernels;
pub mod layers;
pub mod optim;
pub mod params;
pub mod tape;
pub mod tensor;

pub use error::{NnError, Result};
pub use gradcheck::{grad_check, grad_check_with_params, GradCheckReport};
pub use layers::{BatchNorm2d, Conv2d, Linear, LstmCell, LstmState, Mode, ResidualBlock};
pub use optim::{Adam, AdamConfig};
pub use params::{ParamId, Parameter, Params};
pub use tape::{Gradients, ReluBackward, Tape, Var};
pub use tensor::Tensor;
