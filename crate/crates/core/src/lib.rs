//! Desk-scale simulator for personalized federated video segmentation.
//!
//! Sites train a small spatio-temporal attention segmenter whose query
//! embeddings and channel-selection head stay private; everything else is
//! averaged by a server that additionally aligns the global model with
//! instrument features quantified from a synthetic dataset.

pub mod error;
pub mod federation;
pub mod metrics;
pub mod model;
pub mod synthdata;
pub mod tensor;

pub use error::{Error, Result};
