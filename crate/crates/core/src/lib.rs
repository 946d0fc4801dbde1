//! Vision graph neural networks with cross-attention node–neighbor aggregation.

pub mod aggregate;
pub mod cli;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod heatmap;
pub mod layers;
pub mod model;
pub mod params;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use graph::{Adjacency, GraphPolicy, PatchGraph};
pub use tensor::{Tape, Tensor, Var};
