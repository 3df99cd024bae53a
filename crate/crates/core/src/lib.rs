//! Inpainting transformer for visual anomaly detection.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod evaluator;
pub mod gradcheck;
pub mod image;
pub mod metrics;
pub mod model;
pub mod patching;
pub mod scoring;
pub mod training;

pub use error::{IntraError, Result};
