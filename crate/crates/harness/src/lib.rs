//! Training, evaluation, ablation and export tooling for the riskseg models.

pub mod ablate;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod export;
pub mod optim;
pub mod train;

pub use error::{HarnessError, Result};
