//! Probabilistic multimodal fusion with disentangled representations.
//!
//! The crate trains a two-modality classifier that stays usable when one
//! modality is degraded or missing. Per-modality encoders feed probabilistic
//! embedding heads whose diagonal Gaussians are fused with a product of
//! experts; an attention layer splits the fused code into shared and
//! modality-specific parts under a mutual-information penalty; class proxies
//! regularize the embedding geometry; and a teacher trained on complete data
//! distills into a student that sees incomplete inputs.
//!
//! Everything numeric is generic over [`scalar::Scalar`] (f32 or f64); the
//! experiment harness and the file formats pin f64, re-exported below as the
//! default aliases.

pub mod data;
pub mod digest;
pub mod disentangle;
pub mod distill;
pub mod error;
pub mod harness;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod opt;
pub mod prob;
pub mod proxy;
pub mod report;
pub mod scalar;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Default double-precision tensor.
pub type Tensor = tensor::Tensor<f64>;
/// Default double-precision tape.
pub type Tape = tape::Tape<f64>;
/// Default double-precision tape variable.
pub type Var = tape::Var<f64>;

/// Single-precision aliases for callers that only need the math layer.
pub type Tensor32 = tensor::Tensor<f32>;
pub type Tape32 = tape::Tape<f32>;
pub type Var32 = tape::Var<f32>;
