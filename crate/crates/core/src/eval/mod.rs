//! Metrics, reports and figures over adaptation traces.

mod consistency;
mod generate;
mod grid;
mod heatmap;
mod rouge;
mod stats;

pub use consistency::{render_magnitude_svg, schedule_consistency, ConsistencyReport, ConsistencyRow, MagnitudeRow};
pub use generate::{greedy_generate, DEFAULT_MAX_NEW_TOKENS};
pub use grid::{eval_grid, Cell, GridOptions, GridRun, MetricsReport, Nets};
pub use heatmap::{export_heatmap, render_heatmap_svg, HeatmapGrid, RENDERER_VERSION};
pub use rouge::{lcs_len, rouge_lsum};
pub use stats::{mean_se, MeanSe, Z95};
