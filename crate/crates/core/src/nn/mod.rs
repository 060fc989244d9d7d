//! Dense tensors, reverse-mode autodiff, layers and optimizers.

pub mod checkpoint;
pub mod gradcheck;
pub mod kernels;
pub mod layers;
pub mod optim;
pub mod params;
pub mod tape;
pub mod tensor;

pub use params::{ParamId, ParamStore, Parameter};
pub use tape::{Gradients, PadMode, Tape, Var, NORM_EPS};
pub use tensor::{DType, Real, Tensor};

#[cfg(test)]
mod tape_tests;
