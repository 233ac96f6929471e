//! Experiment protocols, metrics and reports.

pub mod config;
pub mod probe;
pub mod report;
pub mod run;
pub mod sweep;

pub use config::{ExperimentConfig, ProbeConfig, ProbeProtocol, Scenario};
pub use probe::{feature_stats, feature_stats_csv, forgetting_probe, ChannelRow};
pub use run::{
    metrics_csv, run_arm, run_experiment, run_with_model, write_outputs, ArmPlan, ArmResult,
    ExperimentData, ExperimentResult, MetricsRecord,
};
pub use sweep::{run_sweep, sweep_alpha, sweep_csv, sweep_module_design, sweep_placement, SweepRow};
