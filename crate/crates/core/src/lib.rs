//! Retrieval-augmented cross-modal point cloud completion.

pub mod data;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod geometry;
pub mod harness;
pub mod model;
pub mod objectives;
pub mod retrieval;
pub mod tensor;

pub use error::{Error, Result};
