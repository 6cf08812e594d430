//! Distillation objective, optimiser and the training step.

pub mod objective;
pub mod optim;
pub mod trainer;

pub use objective::*;
pub use optim::{clip_grad_norm, momentum_at, AdamW, OptimConfig};
pub use trainer::{tube_pass, StepStats, TrainState, Trainer, TubePass};
