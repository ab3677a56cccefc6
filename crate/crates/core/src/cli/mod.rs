//! `pqlmm` command-line front end: `fit`, `infer` and `simulate`.
//!
//! Exit codes: 0 success, 1 usage or validation error, 2 numerical failure
//! or non-convergence, 3 I/O error.

mod artifact;
mod commands;
mod config;
mod dataset;
mod target;

use std::ffi::OsString;

use clap::Parser;

pub use artifact::{Diagnostics, FitArtifact, ARTIFACT_VERSION};
pub use commands::{Cli, Command};
pub use config::{ColumnMap, Grid, InferenceOptions, RunConfig, SimulateConfig, Study, FULL_GRID};
pub use dataset::{load_dataset, parse_dataset, Dataset};
pub use target::TargetSpec;

use crate::error::PqlError;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_NUMERICAL: i32 = 2;
pub const EXIT_IO: i32 = 3;

pub fn exit_code(err: &PqlError) -> i32 {
    match err {
        PqlError::Io(_) => EXIT_IO,
        PqlError::Numerical(_)
        | PqlError::SingularWorkingCovariance { .. }
        | PqlError::SingularClusterBlock { .. } => EXIT_NUMERICAL,
        _ => EXIT_USAGE,
    }
}

/// Parses `args` (including the program name), runs the command and
/// returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match commands::dispatch(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
