//! Experiment runner around `quantfl-core`: configuration files and presets,
//! IDX ingestion, metrics output, and the `run`, `cost` and `sweep`
//! commands.

pub mod commands;
pub mod config;
pub mod error;
pub mod exec;
pub mod idx;
pub mod report;

pub use error::AppError;
