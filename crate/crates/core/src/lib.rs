//! Clip-level video instance segmentation: synthetic data, the network,
//! sequence matching and losses, evaluation and training.

pub mod annotations;
pub mod config;
mod error;
pub mod eval;
pub mod losses;
pub mod mask;
pub mod matching;
pub mod model;
pub mod posenc;
pub mod selftest;
pub mod synth;
pub mod train;

pub use error::{Result, VisError};
