//! Rectified-flow hourglass transformer for generative medical image segmentation.

pub mod accounting;
pub mod attention;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod flow;
pub mod gradcheck;
pub mod graph;
pub mod hfe;
pub mod hourglass;
pub mod layers;
pub mod metrics;
pub mod model;
pub mod params;
pub mod pipeline;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::{Real, Tensor, Tensor4};
