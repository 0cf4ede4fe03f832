//! Evaluation over K_test, reports and plots.

mod eval;
mod gradcheck;
mod plot;
mod report;

pub use eval::{episode_correct, evaluate, evaluate_episodes, wilson, EvalResult, EvalSettings, LoadedModel};
pub use gradcheck::gradcheck_episode;
pub use plot::line_chart;
pub use report::{
    mean_std, paired_comparison, sweep_report, Comparison, ComparisonRow, EvalReport, ReportRow, COMPARISON_HEADER,
    MIN_RUNS_FOR_STD, REPORT_HEADER,
};
