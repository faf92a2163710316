//! Experiment orchestration for the adversarial transfer-learning study:
//! configuration, datasets, strategy runs, sweeps and reports.

pub mod config;
pub mod metrics;
pub mod run;
pub mod sweep;

use advxfer_core::Error;

pub use config::{parse_seeds, ExperimentConfig};
pub use metrics::{evaluate, mean_std, report_from_predictions, MetricsReport};
pub use run::{run_experiment, Datasets, Runner, SeedOutcome};
pub use sweep::{best_epsilon, compare_strategies, sweep_epsilon, sweep_l, CompareTable, SweepTable, EPS_GRID};

/// Process exit code for a failure.
pub fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Config(_) => 2,
        Error::Data(_) => 3,
        Error::Divergence { .. } => 4,
        Error::Io { .. } | Error::Checkpoint(_) => 5,
        Error::Tensor(_) => 1,
    }
}
