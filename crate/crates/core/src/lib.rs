pub mod autograd;
pub mod boxes;
pub mod cost;
pub mod error;
pub mod graph;
pub mod heads;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod pipeline;
pub mod reference;
pub mod tensor;

pub use error::{Error, Result};
