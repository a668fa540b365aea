//! Pipeline orchestration for the LED recommender: configuration, per-stage
//! manifests, the offline stages and the serving entry point.

pub mod config;
pub mod error;
pub mod manifest;
pub mod serve;
pub mod stages;
pub mod synth;

pub use config::PipelineConfig;
pub use error::{CliError, Result};
pub use stages::{Outcome, Runner, Stage};
