//! No-reference point cloud quality assessment with dual-branch masked
//! autoencoder pre-training and cross-attention multi-view fine-tuning.
//!
//! The pipeline: [`geometry`] renders colored point clouds into images,
//! [`patches`] tokenizes them, [`backbone`] provides the transformer
//! encoders/decoders, [`pretrain`] runs masked reconstruction against the
//! distorted and the reference renders, [`finetune`] fuses six views into a
//! quality score, and [`eval`] scores predictions against opinion scores.

pub mod autograd;
pub mod backbone;
pub mod data;
pub mod error;
pub mod eval;
pub mod finetune;
pub mod geometry;
pub mod nn;
pub mod params;
pub mod patches;
pub mod pretrain;
pub mod real;
pub mod seed;
pub mod tensor;
pub mod views;

pub use error::{Error, Result};
pub use real::Real;
pub use tensor::Tensor;
