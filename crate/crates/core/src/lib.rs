pub mod data;
pub mod error;
pub mod gradcheck;
pub mod experiment;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod rankbench;
pub mod softrank;
pub mod tensor;

pub use error::{Error, Result};
