//! On-disk formats: run configs, checkpoints, PNG images and paired datasets.

pub mod checkpoint;
pub mod config;
pub mod image;

pub use checkpoint::Checkpoint;
pub use config::RunConfig;
