//! Variable-rate generative image codec with realism control.

pub mod checkpoint;
pub mod codec;
pub mod corpus;
pub mod disc;
pub mod entropy;
pub mod error;
pub mod eval;
pub mod graph;
pub mod image;
pub mod losses;
pub mod model;
pub mod params;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
