//! Experiment configuration, single runs, seed sweeps and SVG plots.

mod config;
mod plot;
mod run;
mod sweep;

pub use config::{sequence_len, DataConfig, EvalConfig, ExperimentConfig, SweepConfig};
pub use plot::{plot_files, BoxPlot, LinePlot, PlotKind, Series, HEIGHT, WIDTH};
pub use run::{
    eval_checkpoint, evaluate, final_checkpoint, read_em_by_step, read_selection_csv, run, selection_csv, selections,
    test_lines, thread_count, to_examples, train_lines, RunOptions, RunOutcome, Selection, StepEm, EM_BY_STEP_HEADER,
    SELECTION_HEADER, THREADS_ENV,
};
pub use sweep::{
    cell_dir, collect_runs, median, summarize, sweep, RunRow, SummaryRow, SweepSummary, FAILURES_HEADER, RUNS_HEADER,
    SUMMARY_HEADER,
};
