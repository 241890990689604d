//! Bottleneck adapters for a toy vision transformer, with iterative
//! cross-layer neuron pruning driven by a weight-magnitude importance score.

pub mod adapter;
pub mod analysis;
pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod cost;
pub mod data;
pub mod engine;
pub mod error;
mod floats;
pub mod report;
pub mod runner;
pub mod scalar;
pub mod scoring;
pub mod tensor;
pub mod verify;
pub mod vit;

pub use adapter::{Adapter, AdapterPlan, Sigma};
pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::Tensor;
pub use vit::{build_model, Model, ModelSpec};
