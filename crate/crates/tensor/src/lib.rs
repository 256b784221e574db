//! Minimal dense-tensor engine with reverse-mode automatic differentiation,
//! sized for small convolutional networks on a CPU.
//!
//! Values live in a [`Graph`] tape; [`ParamSet`] owns learnable tensors and
//! their momentum-SGD state. The engine is generic over [`Real`] so every
//! operation can be re-run in `f64` by [`grad_check`].

mod error;
mod gradcheck;
mod graph;
mod kernels;
mod params;
mod real;
mod tensor;

pub use error::{Result, TensorError};
pub use gradcheck::grad_check;
pub use graph::{CustomBackward, Graph, Var};
pub use params::{sgd_step, Param, ParamSet};
pub use real::Real;
pub use tensor::Tensor;
