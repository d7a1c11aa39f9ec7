pub mod backbone;
pub mod bit;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod head;
pub mod model;
pub mod nn;
pub mod profiler;
pub mod tensor;
pub mod train;
pub mod vis;

pub use error::{Error, Result};
