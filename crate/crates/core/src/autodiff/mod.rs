//! Minimal reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Tape`] records every operation of a forward pass; [`Tape::backward`]
//! walks it in reverse and accumulates gradients for every tracked value.

mod adam;
pub mod gradcheck;
mod container;
mod init;
mod kernels;
mod tape;
mod tensor;

use thiserror::Error;

pub use adam::{AdamConfig, AdamState};
pub use container::{ContainerError, NamedTensors};
pub use init::{kaiming_init, uniform_fan_in};
pub use tape::{BatchStats, Tape, Var};
pub use tensor::{Scalar, Tensor};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("batch norm needs at least two values per channel, got {0}")]
    DegenerateBatch(usize),
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("row {0} has zero norm")]
    ZeroVector(usize),
}
