//! Dataset files, the synthetic generator, checkpoints and configuration.

pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod synthetic;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use config::Config;
pub use dataset::{load_dataset, save_dataset, Dataset};
pub use synthetic::generate_synthetic;
