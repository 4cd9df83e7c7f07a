//! Recurrent ladder networks with exact Gaussian message-passing
//! foundations, perceptual-grouping inference, synthetic video datasets, and
//! a training/evaluation harness.
//!
//! All numerical code is generic over the scalar type ([`Scalar`]): training
//! runs in `f32`, verification (gradient checks, Gaussian oracles) in `f64`.

pub mod cells;
pub mod data;
pub mod error;
pub mod gaussian;
pub mod gradcheck;
pub mod ladder;
pub mod gradcheck_suite;
pub mod nn;
pub mod scalar;
pub mod tagger;
pub mod tensor;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::{Graph, Tensor, Var};

/// Training-precision tensor.
pub type Tensor32 = Tensor<f32>;
/// Verification-precision tensor.
pub type Tensor64 = Tensor<f64>;
pub type Graph32 = Graph<f32>;
pub type Graph64 = Graph<f64>;
