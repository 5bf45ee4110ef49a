//! Street-level Green View Index (GVI) estimation.
//!
//! The crate covers the whole measurement chain: sample points along a road
//! network, resolve them to street-level images, estimate the fraction of
//! vegetation pixels with either an unsupervised mean-shift baseline or a
//! small convolutional network, explain network predictions with Grad-CAM,
//! and score any predictor against labelled masks.

pub mod error;
pub mod geo;
pub mod imagery;
pub mod gradcam;
pub mod meanshift;
pub mod metrics;
pub mod nnet;
pub mod pipeline;
pub mod raster;
pub mod synth;

pub use error::{Error, Result};
