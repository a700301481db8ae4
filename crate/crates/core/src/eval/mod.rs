//! Image-level evaluation: AUC, histograms, anomaly-rate sweeps and reports.
mod metrics;
mod report;
mod sweep;

pub use metrics::{auc, average_ranks, histogram, spearman, Histogram, DEFAULT_BINS};
pub use report::{ComparisonReport, ComparisonRow, EvalReport, ImageRecord, ReportMetadata};
pub use sweep::{
    evaluate_modules, method_comparison_report, run_ar_sweep, ExperimentSettings, SweepRow, SweepTable, DEFAULT_AR_GRID,
};
