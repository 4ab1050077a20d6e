//! Dense tensors, a reverse-mode tape, parameter storage with Adam, and the
//! handful of layers (GRU cell, MLP) the recommendation model is built from.
//!
//! Everything is generic over [`Scalar`] (`f32` or `f64`); the model uses `f64`.

pub mod check;
mod error;
pub mod nn;
mod params;
mod scalar;
mod tape;
mod tensor;

pub use error::{AutogradError, Result};
pub use params::{AdamConfig, Checkpoint, ParamId, ParamStore, StoredTensor};
pub use scalar::Scalar;
pub use tape::{Tape, Var, NORM_FLOOR};
pub use tensor::Tensor;

pub type Tensor64 = Tensor<f64>;
pub type Tape64 = Tape<f64>;
pub type ParamStore64 = ParamStore<f64>;
