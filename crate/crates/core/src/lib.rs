//! Geo-context guided visual transformer, desk scale.
//!
//! A trainable implementation of guided attention driven by categorical
//! geospatial layers: a tape-based tensor engine with reverse-mode
//! gradients, polygon-to-patch area-weighted geospatial embedding, the
//! guided-attention encoder variants, synthetic data generation, training
//! with per-outcome R² evaluation, and attention-explanation tooling.
//!
//! The numeric kernels are generic over the scalar type (`f32`/`f64`, see
//! [`scalar::Scalar`]); the pipeline itself runs in `f64` through the
//! aliases exported at the crate root.

pub mod attention;
pub mod data;
pub mod error;
pub mod explain;
pub mod fd;
pub mod geo;
pub mod model;
pub mod scalar;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};

/// Pipeline-precision tensor.
pub type Tensor = tensor::Tensor<f64>;
/// Pipeline-precision computation tape.
pub type Tape = tensor::Tape<f64>;
pub use tensor::TensorId;
