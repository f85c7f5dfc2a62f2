//! Command-line workflow for the semspeech pipeline: configs, stage
//! directories, manifests and ablation tables.

pub mod config;
pub mod manifest;
pub mod pipeline;
pub mod stats;

pub use config::{ExperimentConfig, LoadedConfig};
pub use pipeline::Pipeline;
