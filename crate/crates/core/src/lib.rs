//! Graph structured matching for image-text retrieval.
//!
//! Texts become dependency graphs over word nodes, images become fully
//! connected graphs over region nodes with polar edge coordinates. A pair
//! is scored by cross-modal node attention with block-wise cosine matching
//! vectors, a kernelised graph convolution over each graph, and MLP heads
//! for both directions. Training uses a hinge triplet loss with in-batch
//! hard negatives and Adam; evaluation reports Recall@K and rSum.

pub mod autodiff;
pub mod config;
pub mod encode;
pub mod error;
pub mod eval;
pub mod graphbuild;
pub mod graphio;
pub mod manifest;
pub mod matching;
pub mod model;
pub mod params;
pub mod train;

pub use error::{GsmnError, Result};
