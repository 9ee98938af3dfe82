//! Experiment orchestration: configuration, the staged training loop,
//! sweeps and result files.

pub mod config;
pub mod experiment;
pub mod export;

pub use config::{load_config, parse_config, ExperimentConfig, StreamKind, Variant};
pub use experiment::{build_stream, run_experiment, run_on_stream, run_sweep, stage_refs, RunRecord, RunSummary};
pub use export::{export_results, export_sweep, metric_table, read_metric_table, MetricTable};

/// Environment variable naming the default output root.
pub const OUT_ROOT_ENV: &str = "GPE_OUT_ROOT";
