//! Dense tensor engine for training a ResNet18 classifier on CPU.
//!
//! Forward kernels live in [`ops`], reverse-mode differentiation in
//! [`tape`], the optimizer in [`optim`], and the network in [`resnet`].
//! Every tensor type is generic over `f32` (production) and `f64` (used by
//! [`gradcheck`]).

pub mod checkpoint;
pub mod error;
pub mod gradcheck;
pub mod ops;
pub mod optim;
pub mod resnet;
pub mod tape;
pub mod tensor;

pub use error::{NnError, Result};
pub use optim::AdamState;
pub use resnet::{ResNet18, ResNetConfig};
pub use tape::{Gradients, Tape, Var};
pub use tensor::{Element, Tensor};

/// Batchnorm behaviour: batch statistics (`Train`) or running ones (`Eval`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Mode {
    #[default]
    Train,
    Eval,
}
