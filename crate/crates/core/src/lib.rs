pub mod data;
pub mod error;
pub mod evaluator;
pub mod extractor;
pub mod matcher;
pub mod mining;
pub mod model;
pub mod objectives;
pub mod parallel;
pub mod rng;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
