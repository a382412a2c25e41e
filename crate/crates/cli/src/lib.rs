//! Experiment pipelines behind the `bno` command-line tool.

pub mod config;
pub mod error;
pub mod experiments;
pub mod reproduce;
pub mod verify;

pub use config::{default_configs, ExperimentConfig, RootConfig};
pub use error::{CliError, CliResult};
pub use experiments::{evaluate, fit, generate, run, Metrics};
pub use reproduce::{reproduce_all, Check, Report};
