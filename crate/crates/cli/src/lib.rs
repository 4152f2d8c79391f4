//! Command implementations behind the `maskvar` binary. Each command reads
//! one JSON run configuration, writes its artifacts under the run directory,
//! and records a `meta.json` tying the artifacts to the configuration hash.

pub mod ablation;
pub mod config;
pub mod error;
pub mod pipeline;
pub mod report;
pub mod synth;

pub use config::{load_config, RunConfig};
pub use error::CliError;
