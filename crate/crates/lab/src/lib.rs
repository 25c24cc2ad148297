//! Experiment runner for `fbsde-core`: TOML run configs, seeded runs into
//! append-only run directories, replay by file digest, text formats for
//! environment flows and event logs, and the acceptance suite.

pub mod acceptance;
pub mod config;
pub mod error;
pub mod experiments;
pub mod formats;
pub mod output;
pub mod replay;

pub use config::RunConfig;
pub use error::LabError;
pub use output::{run, RunManifest, RunRecord};
pub use replay::{replay, ReplayReport, Verdict};
