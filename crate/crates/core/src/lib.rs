//! Point-cloud semantic segmentation on a small reverse-mode autodiff engine.
//!
//! The crate is organized bottom-up:
//!
//! - [`tensor`] and [`autodiff`]: dense `f64` arrays and the tape that
//!   differentiates through them.
//! - [`nn`]: the parameter registry and pointwise layers.
//! - [`geometry`]: point clouds, KNN, neighborhood centroids, sampling.
//! - [`augmenter`]: the residual local–global feature augmenter.
//! - [`local_context`]: per-point neighborhood encoding and aggregation.
//! - [`network`]: the encoder–decoder segmentation network.
//! - [`train`] and [`metrics`]: loss, Adam, learning-rate schedule, training
//!   loop and confusion-matrix metrics.
//! - [`io`]: cloud files, checkpoints and the synthetic road-scene generator.

pub mod augmenter;
pub mod autodiff;
pub mod error;
pub mod geometry;
pub mod io;
pub mod local_context;
pub mod metrics;
pub mod network;
pub mod nn;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
