//! Trajectory forecasting with selective state-space sequence blocks.

pub mod block;
pub mod config;
pub mod decoder;
pub mod embedding;
pub mod encoder;
pub mod error;
pub mod exec;
pub mod gradcheck;
pub mod metrics;
pub mod graph;
pub mod harness;
pub mod model;
pub mod nn;
pub mod objective;
pub mod params;
pub mod scenario;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use graph::{Graph, Var};
pub use params::{Ctx, ParamBuilder, ParamId, ParamStore};
pub use tensor::Tensor;
