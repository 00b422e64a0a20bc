//! Experiment harness: configs, studies, run artifacts and the command line.

pub mod artifact;
pub mod cli;
pub mod config;
pub mod studies;

pub use artifact::{Manifest, RunArtifact, SCHEMA_VERSION};
pub use cli::cli_main;
pub use config::ExperimentConfig;
pub use studies::{
    run_convergence, run_ergodicity_test, run_fluctuation_test, run_poisson_validation, Status,
};
