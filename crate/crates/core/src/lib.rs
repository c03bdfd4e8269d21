pub mod checkpoint;
pub mod corpus;
pub mod error;
pub mod importance;
pub mod latency;
pub mod model;
pub mod optim;
pub mod pipeline;
pub mod routing;
pub mod rng;
pub mod scaling;
pub mod tape;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
