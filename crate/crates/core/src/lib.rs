pub mod augment;
pub mod config;
pub mod error;
pub mod eval;
pub mod model;
pub mod pipeline;
pub mod signal;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
