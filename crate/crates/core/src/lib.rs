pub mod autograd;
pub mod blocks;
pub mod data;
pub mod designs;
pub mod error;
pub mod grid;
pub mod harness;
pub mod metrics;
pub mod models;
pub mod nn;
pub mod objectives;
pub(crate) mod sampling;
pub mod tensor;

pub use error::{Error, Result};
pub use grid::{DisplacementField, FeatureMap, LabelMap, Volume};
pub use tensor::{Dims3, Tensor};
