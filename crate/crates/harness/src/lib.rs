//! Command-line harness: dataset ingestion, pool building, protected
//! inference runs, experiment recipes and reports.

pub mod config;
pub mod dataset;
mod error;
pub mod pipeline;
pub mod plugin;
pub mod recipes;

pub use config::RunConfig;
pub use error::HarnessError;
pub use pipeline::{run_protected_inference, RunOutput};
