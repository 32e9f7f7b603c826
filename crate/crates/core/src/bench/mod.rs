//! Resource estimation and the preset experiment suite.

mod resources;
mod suite;

pub use resources::{estimate_resources, ResourceReport};
pub use suite::{count_gops, efficiency, run_experiment, run_suite, suite_strategy, ExperimentResult, Suite, SuiteRow};
