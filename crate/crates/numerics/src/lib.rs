//! Differentiable n-dimensional arrays for the Q-Face model stack.
//!
//! A [`Graph`] records operations on [`Tensor`] values and runs a single
//! reverse sweep to populate gradients. Training runs in `f32`; gradient
//! verification runs the same code in `f64` through [`gradcheck`].

pub mod checkpoint;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod params;
mod real;
pub mod rng;
pub mod tensor;

pub use checkpoint::{AnyTensor, Checkpoint};
pub use error::{NumericsError, Result};
pub use graph::{Graph, Var, LN_EPS};
pub use params::{Grads, Param, ParamId, ParamStore, Session};
pub use real::{DType, Real};
pub use rng::{Purpose, RngState, RngStream};
pub use tensor::Tensor;
