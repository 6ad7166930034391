//! Configuration, the end-to-end runner, experiment modes and file formats.

pub mod config;
pub mod experiments;
pub mod export;
pub mod runner;

pub use config::{
    BudgetConfig, ClassificationSource, MaskConfig, MaskTarget, OutputConfig, RunConfig,
};
pub use experiments::{mask_heads, retention_compare, sweep, MaskReport, SweepRow, SweepVariant};
pub use export::{metrics_csv, write_metrics_csv, Trace, TraceStep, METRICS_HEADER};
pub use runner::{divergence, execute, prepare, run, Divergence, RunMetrics, RunOutcome};
