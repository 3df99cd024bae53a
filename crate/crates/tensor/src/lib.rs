//! A small dense tensor engine with reverse-mode automatic differentiation.
//!
//! Values live in [`Tensor`], a row-major array generic over the scalar type
//! ([`f32`] for training, [`f64`] for gradient verification). Computation is
//! recorded on a [`Graph`] as a sequence of [`Primitive`] applications and
//! differentiated with [`Graph::backward`].

mod adam;
mod error;
mod finite_diff;
mod graph;
mod kernels;
mod primitive;
mod real;
mod tensor;
mod vjp;

pub use adam::{Adam, AdamConfig};
pub use error::{Result, TensorError};
pub use finite_diff::{finite_diff_gradient, max_relative_error, relative_error};
pub use graph::{Gradients, Graph, Var};
pub use primitive::{eval_primitive, Primitive};
pub use real::{DType, Real};
pub use tensor::Tensor;
