//! Per-step evaluation series, their summaries, cross-model reports and
//! figure data.

mod figures;
mod report;
mod series;
mod stats;

pub use figures::{emit_figure_data, figure_data, Figure, FigureOptions, FIGURE_SCHEMA};
pub use report::{check_compatible, compare, CompareReport, MetricColumns, ModelRow, ModelRuns, REPORT_COLUMNS, REPORT_SCHEMA};
pub use series::{MetricSeries, METRICS_SCHEMA};
pub use stats::{
    calibration_curve, ccdf_at, clip_percentiles, failure_analysis, lower_median, percentile, pit_histogram, rank_stats,
    ranks_at, representative_seed, run_peak, temporal_summary, trim_count, CalibrationBin, FailureAnalysis, RankStats,
    TemporalSummary, FAILURE_THRESHOLD, TRIM_FRACTION,
};
