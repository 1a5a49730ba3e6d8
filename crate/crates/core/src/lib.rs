//! Leaf-image classification with a hand-written convolutional network.
//!
//! The crate is organised along the pipeline:
//!
//! - [`tensor`]: dense tensors and the forward/backward kernels of every layer type.
//! - [`augment`]: label-preserving image transformations and the T0 / TR / TF policies.
//! - [`data`]: preprocessing, dataset splits, class-uniform batch sampling and the
//!   background batch producer.
//! - [`model`]: network assembly, initialization, checkpoints and transfer loading.
//! - [`solver`]: Nesterov training with a step schedule and periodic test monitoring.
//! - [`eval`]: single-shot and oversampled prediction, confusion matrices, run aggregation.
//! - [`experiment`]: complete split → train → evaluate runs and their aggregation.
//! - [`gradcheck`]: central finite differences for gradient tests.
//! - [`synthetic`]: a procedural leaf-like dataset for desk-scale experiments.

pub mod augment;
pub mod data;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod gradcheck;
pub mod image;
pub mod model;
pub mod rng;
pub mod solver;
pub mod synthetic;
pub mod tensor;

pub use error::{Error, Result};
pub use image::ImageU8;
