//! Scoring rules, detection metrics, and oracle diagnostics for
//! out-of-distribution detection on pre-extracted features and logits.
//!
//! Conventions used throughout:
//! - every score is oriented so that larger values mean "more
//!   in-distribution";
//! - tensors are stored as f32 ([`tensor::TensorF32`]) and all statistics
//!   accumulate in f64 (`nalgebra::DMatrix<f64>`, one sample per row);
//! - randomness comes from [`rng`], keyed by an explicit 64-bit seed.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod experiment;
pub mod feature_scores;
pub mod generative;
pub mod laplace;
pub mod linalg;
pub mod logit_scores;
pub mod metrics;
pub mod oracle;
pub mod rng;
pub mod scenarios;
pub mod shallow;
pub mod synth;
pub mod tensor;

pub use error::{Error, Result};

/// Toolkit version recorded in run manifests.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
