//! Mask-conditioned teacher-student self-distillation on video tubes.
//!
//! The crate covers the whole pipeline: tube sampling and synthetic
//! co-occurrence videos ([`videodata`]), mask algebra ([`maskops`]), view
//! generation ([`viewgen`]), a small transformer encoder with reverse-mode
//! gradients ([`encoder`]), the distillation objective and trainer
//! ([`distill`]), patch-graph object discovery with CorLoc ([`discovery`]) and
//! the experiment harness behind the `vino` binary ([`harness`]).

pub mod error;
pub mod image;
pub mod encoder;
pub mod harness;
pub mod discovery;
pub mod distill;
pub mod maskops;
pub mod videodata;
pub mod viewgen;

pub use error::{Error, Result};
