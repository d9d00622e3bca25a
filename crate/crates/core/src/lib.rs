pub mod backbone;
pub mod config;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod mask;
pub mod memory;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod query;
pub mod spatial_semantic;
pub mod tensor;

pub use config::{EngineConfig, ModelConfig};
pub use error::{Error, Result};
pub use mask::LabelMask;
pub use tensor::{Tape, Tensor, Var};
