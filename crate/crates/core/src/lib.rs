//! A self-attention encoder whose position-wise fully-connected layers are
//! (grouped) 1D convolutions, with an analytic FLOP/parameter profiler,
//! a hand-written backward pass certified by finite differences, and a
//! bit-exact checkpoint format.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod attention;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod error;
pub mod grad;
pub mod layers;
pub mod losses;
pub mod model;
pub mod profile;
pub mod tensor;
pub mod toy;
pub mod verify;

pub use config::{LayerRole, ModelConfig};
pub use error::{Error, Result};
pub use model::{build_model, forward, ModelWeights};
pub use tensor::Tensor;
