//! Desk-scale multi-temporal remote sensing vision-language pipeline.

pub mod ablation;
pub mod change;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod lm;
pub mod metrics;
pub mod model;
pub mod packing;
pub mod param;
pub mod prompt;
pub mod tensor;
pub mod train;
pub mod vision;

pub use tensor::Tensor;
