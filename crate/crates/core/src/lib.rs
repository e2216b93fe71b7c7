pub mod autograd;
pub mod bots;
pub mod data;
pub mod error;
pub mod experiment;
pub mod learners;
pub mod metrics;
pub mod model;
pub mod package;
pub mod protocol;
pub mod retrieval;
pub mod simulator;
pub mod tensor;
pub mod text;

pub use error::{Error, Result};
