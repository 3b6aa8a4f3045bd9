//! Heterogeneous split-LoRA fine-tuning on a toy transformer.
//!
//! A small decoder is cut at a block boundary between client devices and a
//! server. Each side trains LoRA adapters whose ranks and split point are
//! chosen per round from computing budgets and a resource-normalized
//! gradient-weight importance. Client adapters of different ranks are
//! aggregated exactly by concatenating their factors.
//!
//! Numerical modules are generic over [`scalar::Scalar`] (`f32`, `f64`);
//! the aliases below fix `f64`, which the training loop uses.

pub mod aggregation;
pub mod checks;
pub mod config;
pub mod dataset;
pub mod gradcheck;
pub mod importance;
pub mod lora;
pub mod metrics;
pub mod model;
pub mod net;
pub mod orchestrator;
pub mod planner;
pub mod scalar;
pub mod tensor;
pub mod wire;

pub type Matrix = tensor::Matrix<f64>;
pub type LoraAdapter = lora::LoraAdapter<f64>;
pub type ModelParams = model::ModelParams<f64>;
pub type AdapterSet = model::AdapterSet<f64>;
pub type AdapterUpload = aggregation::AdapterUpload<f64>;
