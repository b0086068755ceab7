//! Differentiable tensor operations recorded on a [`Tape`](crate::autograd::Tape).

mod elementwise;
pub(crate) mod linalg;
mod reduce;
mod shape;
pub(crate) mod softmax;

pub use elementwise::{sigmoid, BinaryOp, UnaryOp};
pub use reduce::ReduceOp;
