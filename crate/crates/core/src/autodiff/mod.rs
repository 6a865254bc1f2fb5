//! Reverse-mode automatic differentiation over [`Tensor`](crate::tensor::Tensor).
//!
//! Every operation is a method on [`Var`] that records its backward rule on the owning
//! [`Tape`]. Binary elementwise operations accept equal shapes, or a one-element operand;
//! any other broadcasting must go through [`Var::broadcast_to`].

mod conv;
mod elementwise;
mod linalg;
mod reduce;
mod softmax;
mod tape;
mod view;

pub use reduce::ReduceOp;
pub use tape::{Gradients, Tape, Var};
pub use view::concat;

