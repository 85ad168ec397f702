//! Hierarchical video saliency prediction.
//!
//! The network encodes a short clip with a 3D CNN, decodes a conspicuity map
//! from each of four encoder depths and fuses them into one saliency map.
//! Optional extensions align features across domains with gradient reversal
//! or learn per-domain priors, smoothing and normalization statistics.

pub mod config;
pub mod data;
mod error;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod params;
pub mod train;

pub use config::{ModelConfig, TapShape, Variant};
pub use error::{Error, Result};
pub use hd2s_tensor as tensor;
pub use hd2s_tensor::DomainTag;
pub use model::{Forward, ForwardOptions, Hd2s};
