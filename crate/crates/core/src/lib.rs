pub mod audio;
pub mod dataset;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod sampling;
pub mod scalar;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use graph::{Graph, Var};
pub use scalar::Scalar;
pub use tensor::Tensor;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod params;
