//! Config-driven runs, grid sweeps and figure tables.

pub mod config;
pub mod figures;
pub mod run;
pub mod sweep;

pub use config::{parse_activation, DataSource, RunConfig, RunMethod, StudentConfig, TrainSettings, DEFAULT_OUT_DIR, OUT_DIR_ENV};
pub use figures::{emit_figures, fit_loglog_slope, FigureOptions, FIGURE_IDS};
pub use run::{execute, execute_on, read_trace, run_experiment, FinalMetrics, RunOutcome, RunRecord, RunStatus, Seeds};
pub use sweep::{log10_grid, run_sweep, select_best, verify_sweep, BestRow, SummaryRow, SweepOutput, SweepSpec};
