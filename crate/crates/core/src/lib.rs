pub mod allocator;
pub mod cli;
pub mod corpus;
pub mod error;
pub mod model;
pub mod numerics;
pub mod profiler;
pub mod trainer;

pub use error::{Error, Result};
