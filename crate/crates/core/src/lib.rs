pub mod config;
pub mod error;
pub mod io;
pub mod label;
pub mod metrics;
pub mod network;
pub mod nn;
pub mod object_memory;
pub mod object_transformer;
pub mod pixel_memory;
pub mod runner;
pub mod tensor;
pub mod testing;

pub use error::{Error, Result};
pub use config::{InferenceConfig, ModelConfig};
pub use label::{LabelMap, ObjectId};
pub use network::{Network, Session, StepOutput};
pub use nn::ParamRegistry;
pub use tensor::{Element, Tensor};
