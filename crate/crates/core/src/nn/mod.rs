//! Differentiable numeric substrate.
//!
//! Everything is generic over [`Real`] so that the same model code runs in
//! `f32` for training and in `f64` for finite-difference gradient checks.

pub mod checkpoint;
mod graph;
pub mod init;
pub mod layers;
pub mod optim;
mod params;
mod real;
mod tensor;

pub use graph::{AttnLayout, Graph, JointMixing, Var};
pub use params::{Grads, ParamId, ParamStore, Parameter};
pub use real::{gemm, Real};
pub use tensor::Tensor;
