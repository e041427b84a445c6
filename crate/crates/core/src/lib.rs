pub mod commands;
pub mod data;
pub mod error;
pub mod geometry;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod tensor;
pub mod train;
pub mod warning;

pub use error::{Error, Result};
pub use geometry::{BBox, BinaryMask, Class};
pub use model::{Model, ModelConfig};
pub use tensor::Tensor;
