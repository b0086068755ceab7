//! Global-aggregation / local-distribution (GALD) modules on a small
//! reverse-mode autodiff engine, with the layers, losses, optimizer and
//! synthetic benchmark used to train and compare them.

pub mod autograd;
pub mod checkpoint;
pub mod config;
pub mod context;
pub mod digest;
pub mod error;
pub mod gald;
pub mod gradcheck;
pub mod gtf;
pub mod nn;
pub mod ops;
pub mod segnet;
pub mod suite;
pub mod synth;
pub mod tensor;
pub mod viz;

pub use autograd::{Tape, Var};
pub use error::{Error, Result};
pub use tensor::Tensor;
