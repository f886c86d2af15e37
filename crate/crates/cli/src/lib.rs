//! Experiment runner for flexible-step MPC: JSON configs in, CSV/JSON/SVG
//! artifacts out.

pub mod compare;
pub mod config;
pub mod error;
pub mod experiment;
pub mod plot;

pub use config::{load_config, parse_config, ExperimentConfig, Scenario};
pub use error::{CliError, Result};
pub use experiment::run_experiment;
