//! Dynamic contrastive knowledge distillation (DCKD) for image restoration.
//!
//! The crate provides the pieces of a teacher/student distillation pipeline
//! for toy restoration tasks, built around four loss terms:
//!
//! * an L1 reconstruction loss against ground truth,
//! * a vanilla logits-style KD loss against a frozen teacher,
//! * a dynamic contrastive loss whose negatives come from a lagged
//!   "history" copy of the student fed with degraded inputs,
//! * a pixel-level category-distribution alignment loss built on a frozen
//!   multi-scale encoder and a fixed codebook.
//!
//! Everything runs in `f64` on the CPU so analytic gradients can be checked
//! against central finite differences. Batch-level inner loops use rayon when
//! the `parallel` feature (default) is enabled; results are identical either
//! way because reductions happen in a fixed order.

pub mod codebook;
pub mod data;
pub mod dcr;
pub mod degradation;
pub mod dmm;
pub mod encoder;
pub mod error;
pub mod image;
pub mod metrics;
pub mod models;
pub mod parallel;
pub mod rng;
pub mod trainer;

pub use error::CoreError;
pub use image::Image;

/// Crate result alias.
pub type Result<T> = std::result::Result<T, CoreError>;
