//! Pool key-point model, heatmap decoding, evaluation and homography-based
//! localization for swimming-pool footage.

pub mod annotation_io;
pub mod error;
pub mod heatmap;
pub mod homography;
pub mod metrics;
pub mod pool_model;
pub mod synth;

pub use error::{Error, Result};
