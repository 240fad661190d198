//! Prediction and super-resolution of spatial gene expression from histology.

pub mod cli;
pub mod dataset;
pub mod error;
pub mod extractors;
pub mod metrics;
pub mod model;
pub mod preprocess;
pub mod superres;
pub mod synthbench;
pub mod trainer;

pub use error::{Error, Result};
