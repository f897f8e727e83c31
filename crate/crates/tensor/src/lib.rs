//! A small reverse-mode automatic differentiation engine over dense,
//! row-major arrays.
//!
//! The engine is deliberately narrow: it supports exactly the operations the
//! fibre-bundle super-resolution networks and losses need (element-wise
//! arithmetic with broadcasting, reductions, matrix multiply, 2D convolution,
//! batch normalisation, a handful of activations and a segment-mean used for
//! Voronoi-cell averaging).
//!
//! Every [`Tensor`] is a reference-counted node. Operations on tensors that
//! require gradients record their parents and a backward closure; calling
//! [`Tensor::backward`] on a scalar walks the graph once in reverse
//! topological order and accumulates gradients into the leaves. Dropping the
//! loss frees the graph.
//!
//! The element type is generic over [`Scalar`] (`f32` and `f64`). Models run
//! in `f32`; gradient checks instantiate the same code in `f64`.

mod conv;
mod error;
mod linalg;
mod nn;
mod ops;
mod scalar;
mod shape;
mod tensor;

pub use conv::Conv2dSpec;
pub use error::{Result, TensorError};
pub use nn::BatchNormOutput;
pub use scalar::Scalar;
pub use shape::{broadcast_shapes, numel};
pub use tensor::{BackwardFn, Tensor};
