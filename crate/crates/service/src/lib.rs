//! Configuration, pipeline orchestration, HTTP API and CLI around
//! [`pisco_core`].

pub mod cli;
pub mod config;
pub mod http;
pub mod pipeline;

pub use config::{ConfigError, PipelineConfig};
pub use pipeline::{IngestOutcome, Pipeline, PipelineError, StageError, StatsKind};
