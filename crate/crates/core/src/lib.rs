pub mod baselines;
pub mod bench;
pub mod checkpoint;
pub mod config;
pub mod data;
mod error;
pub mod eval;
pub mod model;
pub mod prep;
pub mod reorg;
pub mod synth;
pub mod train;
pub mod ubc;
pub mod ubp;

pub use error::{HimError, Result};
