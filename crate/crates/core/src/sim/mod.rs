//! Simulation designs, replicate runners and summary metrics.
//!
//! Replicate `i` draws everything from streams keyed by `(seed, i)`, so a
//! report depends only on the design and seed, never on thread count.

mod experiment;
mod generate;
mod report;
mod shapiro;

pub use experiment::{
    excess_kurtosis, frobenius_table, run_coverage_experiment, run_gap_normality_study, sample_variance,
    ExperimentOptions, ExperimentReport, FrobeniusCell, GMode, GapStats, SimTarget,
};
pub use generate::{
    generate, generate_poisson_intercept, generate_section5, true_random_effects, SimDesign, SimModel, SimRegime,
    SimReplicate,
};
pub use report::{report_csv, write_reports};
pub use shapiro::{shapiro_wilk, ShapiroWilk};
