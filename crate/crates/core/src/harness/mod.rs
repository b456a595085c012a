//! Command-line experiments: survey reproductions, timing, gradient checks
//! and operator caching.

pub mod check;
pub mod config;
pub mod experiment;
pub mod fields;
pub mod output;
pub mod timing;

pub use check::{check_gradients, CheckConfig, GradientReport};
pub use config::{ExperimentConfig, GridRole, Kind, PerturbationModel};
pub use experiment::{
    run_experiment, run_experiment_1d, run_experiment_2d, trial_setup, ExperimentReport, TrialResult, TrialSetup,
};
pub use fields::Field;
pub use timing::{run_timing, TimingRow};
