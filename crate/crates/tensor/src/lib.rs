//! Dense CPU tensors with tape-based reverse-mode differentiation.
//!
//! Everything is generic over [`Real`] so the same model code trains in `f32`
//! and is gradient-checked in `f64`.

pub mod conv;
pub mod gradcheck;
mod graph;
mod optim;
mod params;
mod real;
mod tensor;

pub use graph::{sigmoid, softplus, Gradients, Graph, Var};
pub use optim::{clip_global_norm, Adam};
pub use params::{Bound, ParamId, ParamSet};
pub use real::{gemm, Real};
pub use tensor::{numel, Tensor};
