pub mod channel;
pub mod codec;
pub mod data;
pub mod error;
pub mod experiments;
pub mod image_tensor;
pub mod metrics;
pub mod nn;
pub mod rng;
pub mod training;

pub use error::{Error, Result};
