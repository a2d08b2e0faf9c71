//! Batch pipeline around `crashsev_core`: configuration, subcommands and
//! report formatting.

pub mod config;
pub mod pipeline;
pub mod table;

pub use config::PipelineConfig;
pub use pipeline::Context;
