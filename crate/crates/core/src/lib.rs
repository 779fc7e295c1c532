//! Knowledge-embedded self-supervised pre-training for small biomedical
//! images.
//!
//! The crate couples two reconstructive proxy tasks (monotone Bézier
//! intensity translation and anatomy-shaped masking) with a joint
//! contrastive + restoration objective on a compact U-Net, and ships the
//! downstream fine-tuning harness used to measure what the pre-training
//! buys: classification AUC, segmentation Dice and label-fraction sweeps.
//!
//! Numeric code is generic over [`Scalar`] (`f32` or `f64`); the aliases at
//! the crate root fix the precision used for training.

// `!(x > 0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod augment;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod image;
pub mod losses;
pub mod nn;
pub mod report;
pub mod rng;
pub mod scalar;
pub mod trainer;
pub mod transform;

pub use error::{Result, TowerError};
pub use image::{Image, ImageBatch};
pub use scalar::Scalar;

/// Single-precision image, the training default.
pub type Image32 = Image<f32>;
/// Double-precision image.
pub type Image64 = Image<f64>;

/// Single-precision tensor.
pub type Tensor32 = nn::Tensor<f32>;
/// Double-precision tensor, used for gradient checks.
pub type Tensor64 = nn::Tensor<f64>;
pub type ModelState32 = nn::ModelState<f32>;
pub type ModelState64 = nn::ModelState<f64>;
