//! From-scratch MLP-Mixer toolkit.
//!
//! Everything runs on a minimal dense-tensor core with reverse-mode
//! differentiation; no external linear-algebra or ML backend. The numeric
//! element type is generic ([`Scalar`]): `f32` is the training precision,
//! `f64` the verification precision used by the gradient-check and oracle
//! suites.

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod graph;
pub mod model;
pub mod probe;
pub mod rng;
pub mod scalar;
pub mod surgery;
pub mod tensor;
pub mod train;
pub mod viz;

pub use error::{Error, Result};
pub use graph::{Gradients, Graph, NodeId};
pub use model::{MixerConfig, MixerParams, Variant};
pub use scalar::{Dtype, Scalar};
pub use tensor::Tensor;

/// Runtime-precision tensor.
pub type Tensor32 = Tensor<f32>;
/// Verification-precision tensor.
pub type Tensor64 = Tensor<f64>;
/// Runtime-precision tape.
pub type Graph32 = Graph<f32>;
/// Verification-precision tape.
pub type Graph64 = Graph<f64>;
/// Runtime-precision parameter set.
pub type MixerParams32 = MixerParams<f32>;
/// Verification-precision parameter set.
pub type MixerParams64 = MixerParams<f64>;
