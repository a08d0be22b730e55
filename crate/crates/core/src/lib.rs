//! Single-LoRA continual learning with orthogonal initialization and
//! time-aware asymmetric merging, plus baselines, continual-learning metrics
//! and numerical checks of the training dynamics.

pub mod adapter;
pub mod cli;
pub mod dynamics;
pub mod error;
pub mod matlib;
pub mod merge;
pub mod metrics;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
pub use matlib::Matrix;
