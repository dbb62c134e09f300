//! Experiment configuration, training runs, and the tables built from them.

pub mod config;
pub mod gradcheck;
pub mod io;
pub mod run;
pub mod tables;

pub use config::{ExperimentConfig, CONFIG_VERSION};
pub use gradcheck::{gradcheck, GradcheckReport, GradcheckSettings};
pub use run::{run_and_write, run_experiment, run_with_target, RunArtifacts, RunRecord};
pub use tables::{
    compare_losses, correlate, correlate_blocks, simulate_bernoulli_blocks, sweep_alpha, sweep_block, Persist, Table,
};
