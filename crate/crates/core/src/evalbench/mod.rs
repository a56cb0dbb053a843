//! Evaluation bench: region/boundary/success-rate metrics, input
//! corruptions, frequency filters, and the sweep harness that drives
//! robustness tables.

mod corrupt;
mod freq;
mod metrics;
mod sweep;

pub use corrupt::{corrupt, NoiseKind};
pub use freq::{frequency_filter, FreqFilter, LOWPASS_TABLE};
pub use metrics::{
    boundary_f, iou, largest_component_box, success_rate, BoundingBox, SR_THRESHOLDS,
};
pub use sweep::{run_sweep, EpisodeMetrics, MetricReport, RowSpec, SweepRow};
