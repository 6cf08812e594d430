//! Configuration, checkpoints, training loop and evaluation behind the
//! `vino` command line.

pub mod checkpoint;
pub mod config;
pub mod eval;
pub mod train;

pub use checkpoint::Checkpoint;
pub use config::ExperimentConfig;
