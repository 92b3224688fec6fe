//! Few-shot defect classification for SEM inspection images.

pub mod cli;
pub mod dataset;
pub mod embedder;
pub mod error;
pub mod knn;
pub mod metrics;
pub mod pseudolabel;
pub mod trainer;
pub mod tsne;

pub use error::{Error, Result};
