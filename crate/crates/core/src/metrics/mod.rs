//! KPIs and the evaluation harness.

mod eval;
mod kpi;

pub use eval::{
    episode_seed, evaluate, evaluate_cell, plot_data, run_episode, spearman, tbler_sweep, write_csv, Controller, Decoding, EpisodeReport, EvalConfig, KpiRow, PlotPoint, Scenario, Stat, TokenController,
    CSV_COLUMNS,
};
pub(crate) use eval::check_schema;
pub use kpi::{rbg_efficiency, throughput, EpisodeKpis, Kpis};
