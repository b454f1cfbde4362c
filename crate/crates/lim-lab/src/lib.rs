//! Desk-scale study of latent visual-slot imagination and its effect on
//! calibration in a small frozen multimodal transformer.
//!
//! The crate trains a toy vision+text answerer on paired synthetic scenes,
//! freezes it, then trains a small cross-attention module that predicts the
//! visual-slot embeddings from text alone. The experiment harness compares
//! text-only inference, imagined-slot injection, and several substitute
//! embeddings on accuracy and expected calibration error.
//!
//! All numeric kernels are generic over the scalar type: training runs use
//! `f32`, tests and gradient checks use `f64`.

pub mod backbone;
pub mod calibration;
pub mod config;
pub mod data;
pub mod error;
pub mod experiments;
pub mod lim;
pub mod numerics;
pub mod rng;
pub mod scalar;
pub mod training;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Matrix in the precision used by default training runs.
pub type Mat32 = numerics::Matrix<f32>;
/// Matrix in the precision used by tests and gradient checks.
pub type Mat64 = numerics::Matrix<f64>;
