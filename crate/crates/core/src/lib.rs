//! Bi-encoder contrastive named entity recognition.

pub mod baseline;
pub mod datasets;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod head;
pub mod metrics;
pub mod model;
pub mod objectives;
pub mod trainer;

pub use error::{Error, Result};
