//! Gradient-aware open-set separation for prompt-tuned vision-language
//! classifiers, operating on precomputed feature embeddings.
//!
//! - [`math`]: softmax, KL-to-uniform loss, Jacobians, prompt gradients, scores
//! - [`encoder`]: surrogate prompt encoders with vector-Jacobian products
//! - [`separation`]: source-calibrated thresholds and known/unknown partitions
//! - [`training`]: pseudolabels, the bifurcated adaptation loss, SGD schedule
//! - [`metrics`]: AUROC, FPR at fixed TPR, CCR at fixed FPR
//! - [`data`]: embedding container, class manifest, synthetic generator

pub mod data;
pub mod encoder;
mod error;
pub mod linalg;
pub mod math;
pub mod metrics;
pub mod separation;
pub mod training;

pub use error::{Error, Result};
