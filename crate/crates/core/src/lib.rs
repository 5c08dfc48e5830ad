//! Benchmark framework for adapting frozen vision-transformer backbones to
//! binary EM mitochondria segmentation, with head-only or LoRA training, and
//! for measuring inter-dataset domain mismatch in embedding space.

pub mod backbones;
pub mod datasets;
pub mod diagnostics;
pub mod error;
pub mod exec;
pub mod experiment;
pub mod lora;
pub mod metrics;
pub mod seghead;
pub mod trainer;

pub use error::{Error, Result};
pub use exec::Exec;
