//! LUCF-Net: a lightweight U-shaped CNN-Transformer segmentation network with
//! cascaded multi-depth output fusion, built on a small reverse-mode autodiff
//! engine.
//!
//! Module map:
//! - [`tensor`]: tensors, the autodiff [`tensor::Graph`], gradient checking, deterministic RNG
//! - [`nn`]: parameter registry, basic layers and the local-global (LG) block
//! - [`model`]: the full network, its output heads, complexity accounting and feature dumps
//! - [`loss`]: cross-entropy, Dice, Lovász-Softmax, pixel OHEM, hybrid and deep-supervision losses
//! - [`metrics`]: Dice, IoU and Hausdorff distances with per-case reports
//! - [`data`]: synthetic datasets, augmentation, image/mask I/O and splitting
//! - [`train`]: SGD with momentum, poly learning-rate decay, checkpoints, training and evaluation

pub mod data;
pub mod error;
pub mod gradsuite;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
