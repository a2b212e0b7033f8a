//! Metrics, experiment protocols and report files.

mod experiments;
mod metrics;
mod report;

pub use experiments::{
    ablation_experiment, aggregate, hyperparameter_sweep, noise_robustness_experiment, run_method,
    Aggregate, BestSetting, CellResult, CellTiming, ExperimentKind, ExperimentReport,
    ExperimentSetup, Method, SweepAxis, DEFAULT_SEEDS, FOLD_GRID, NOISE_LEVELS, WEIGHT_GRID,
};
pub use metrics::{compute_metrics, evaluate, MetricSet, DEFAULT_MAPE_THRESHOLD};
pub use report::{
    Execution, PhaseSummary, RunReport, WeightSummary, REPORT_FILE, REPORT_SCHEMA_VERSION,
};

#[cfg(test)]
mod tests;
