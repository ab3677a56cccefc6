use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use nalgebra::DVector;
use rand::Rng;
use serde::Serialize;

use super::artifact::FitArtifact;
use super::config::{check_level, load_json, RunConfig, SimulateConfig, Study};
use super::dataset::load_dataset;
use super::target::TargetSpec;
use super::{EXIT_NUMERICAL, EXIT_OK};
use crate::error::{PqlError, Result};
use crate::family::Family;
use crate::inference::{
    conditional_interval, linear_predictor_interval, prediction_gap_interval, unconditional_fixed_interval,
    IntervalResult, Regime, TargetSelection,
};
use crate::rng::{item_stream, Purpose};
use crate::sim::{frobenius_table, run_coverage_experiment, run_gap_normality_study, write_reports};
use crate::solver::{estimate_dispersion_with, fit_pql};

#[derive(Debug, Parser)]
#[command(name = "pqlmm", version, about = "Penalized quasi-likelihood fitting and inference for GLMMs")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit a model to a CSV data set and write a JSON artifact.
    Fit(FitArgs),
    /// Build intervals from a fit artifact.
    Infer(InferArgs),
    /// Run a simulation study from a JSON config.
    Simulate(SimulateArgs),
}

#[derive(Debug, Args)]
pub struct Common {
    /// JSON run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Response family (overrides the config).
    #[arg(long)]
    pub family: Option<Family>,
    /// Print the resolved configuration and exit.
    #[arg(long)]
    pub show_config: bool,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    #[command(flatten)]
    pub common: Common,
    /// CSV data file.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Artifact path; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    #[command(flatten)]
    pub common: Common,
    /// Fit artifact written by `fit`.
    #[arg(long)]
    pub fit: PathBuf,
    /// The CSV data the artifact was fitted to.
    #[arg(long)]
    pub data: PathBuf,
    /// beta:K | b:cluster=ID[,k=K] | gap:cluster=ID[,k=K] | lp:cluster=ID,a=A1;A2;..
    #[arg(long, required = true)]
    pub target: Vec<String>,
    #[arg(long)]
    pub regime: Option<String>,
    #[arg(long)]
    pub level: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// JSON simulation configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub family: Option<Family>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads (0 = all cores).
    #[arg(long, default_value_t = 0)]
    pub jobs: usize,
    /// Output directory for the CSV and JSON reports.
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
    /// Print the resolved plan and exit without running.
    #[arg(long)]
    pub dry_run: bool,
    #[arg(long)]
    pub show_config: bool,
}

pub(crate) fn dispatch(cli: Cli) -> Result<i32> {
    match cli.command {
        Command::Fit(a) => cmd_fit(&a),
        Command::Infer(a) => cmd_infer(&a),
        Command::Simulate(a) => cmd_simulate(&a),
    }
}

fn to_json<T: Serialize>(v: &T) -> Result<String> {
    serde_json::to_string_pretty(v).map(|s| s + "\n").map_err(|e| PqlError::Io(e.to_string()))
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => fs::write(p, text).map_err(|e| PqlError::Io(format!("{}: {e}", p.display()))),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn run_config(common: &Common) -> Result<RunConfig> {
    let mut cfg: RunConfig = match &common.config {
        Some(p) => load_json(p)?,
        None => RunConfig::default(),
    };
    if let Some(f) = common.family {
        cfg.family = f;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn resolve_seed(seed: Option<u64>) -> u64 {
    seed.unwrap_or_else(|| {
        let s: u64 = rand::rng().random();
        eprintln!("seed: {s}");
        s
    })
}

pub fn cmd_fit(args: &FitArgs) -> Result<i32> {
    let cfg = run_config(&args.common)?;
    if args.common.show_config {
        print!("{}", to_json(&cfg)?);
        return Ok(EXIT_OK);
    }
    let data_path = args.data.as_ref().ok_or_else(|| PqlError::InvalidArgument("--data is required".into()))?;
    let data = load_dataset(data_path, &cfg.columns, cfg.partnered)?;
    let p_r = data.design.p_r();
    let fit = fit_pql(&data.design, cfg.family, &cfg.solver, &nalgebra::DMatrix::identity(p_r, p_r), 1.0)?;
    let phi_tilde = estimate_dispersion_with(&data.design, &fit, cfg.family, cfg.solver.dispersion_df_correction)?;
    let artifact = FitArtifact::from_fit(&data, &fit, phi_tilde, &cfg.columns, cfg.partnered, &cfg.solver);
    emit(args.out.as_deref(), &to_json(&artifact)?)?;
    if fit.converged {
        Ok(EXIT_OK)
    } else {
        eprintln!("warning: fit did not converge (gradient sup-norm {:.3e}); artifact is partial", fit.final_grad_norm);
        Ok(EXIT_NUMERICAL)
    }
}

fn select_components(k: Option<usize>, p: usize) -> Result<Vec<usize>> {
    match k {
        Some(k) if k >= p => Err(PqlError::InvalidArgument(format!("component {} out of range 1..={p}", k + 1))),
        Some(k) => Ok(vec![k]),
        None => Ok((0..p).collect()),
    }
}

pub fn cmd_infer(args: &InferArgs) -> Result<i32> {
    let mut cfg = run_config(&args.common)?;
    if let Some(r) = &args.regime {
        cfg.inference.regime = r.clone();
    }
    if let Some(l) = args.level {
        cfg.inference.level = l;
    }
    if args.seed.is_some() {
        cfg.inference.seed = args.seed;
    }
    check_level(cfg.inference.level)?;
    let regime: Regime = cfg.inference.regime()?;
    if args.common.show_config {
        print!("{}", to_json(&cfg)?);
        return Ok(EXIT_OK);
    }
    let targets = args.target.iter().map(|t| t.parse::<TargetSpec>()).collect::<Result<Vec<_>>>()?;
    let artifact: FitArtifact = load_json(&args.fit)?;
    if artifact.family != cfg.family && args.common.family.is_some() {
        return Err(PqlError::InvalidArgument("--family differs from the fitted family".into()));
    }
    let data = load_dataset(&args.data, &artifact.columns, artifact.partnered)?;
    let fit = artifact.to_fit(&data)?;
    let design = &data.design;
    let level = cfg.inference.level;
    let settings = &cfg.inference.settings;
    let seed = resolve_seed(cfg.inference.seed);
    let conditional = regime == Regime::Conditional;
    let p_f = design.p_f();
    let p_r = design.p_r();

    let mut records: Vec<IntervalResult> = Vec::new();
    for (t_idx, t) in targets.iter().enumerate() {
        let t_seed: u64 = item_stream(seed, t_idx as u64, Purpose::MixtureDraws).random();
        match t {
            TargetSpec::Beta { k } => {
                if *k >= p_f {
                    return Err(PqlError::InvalidArgument(format!("beta component {} out of range 1..={p_f}", k + 1)));
                }
                let sel = TargetSelection::fixed_effect(*k, p_f);
                records.push(if conditional {
                    conditional_interval(design, &fit, &sel, level)?
                } else {
                    unconditional_fixed_interval(design, &fit, &sel, level, &fit.g_hat)?
                });
            }
            TargetSpec::RandomEffect { cluster, k } if conditional => {
                let i = data.cluster_index(cluster)?;
                for kk in select_components(*k, p_r)? {
                    records.push(conditional_interval(design, &fit, &TargetSelection::random_effect(i, kk, p_r), level)?);
                }
            }
            TargetSpec::RandomEffect { cluster, k } | TargetSpec::Gap { cluster, k } => {
                let i = data.cluster_index(cluster)?;
                select_components(*k, p_r)?;
                records.extend(prediction_gap_interval(design, &fit, i, *k, level, regime, &fit.g_hat, settings, t_seed)?);
            }
            TargetSpec::LinearPredictor { cluster, a } => {
                let i = data.cluster_index(cluster)?;
                let a = DVector::from_vec(a.clone());
                records.push(if conditional {
                    if a.len() != p_r {
                        return Err(PqlError::Dimension(format!("a has length {}, expected {p_r}", a.len())));
                    }
                    conditional_interval(design, &fit, &TargetSelection::linear_combo(i, a), level)?
                } else {
                    linear_predictor_interval(design, &fit, i, &a, level, &fit.g_hat, settings, t_seed)?
                });
            }
        }
    }
    // label random effects by cluster id rather than position
    for r in &mut records {
        for (i, id) in data.cluster_ids.iter().enumerate() {
            let pos = format!("b[{}]", i + 1);
            if r.target.contains(&pos) {
                r.target = r.target.replacen(&pos, &format!("b[cluster={id}]"), 1);
                break;
            }
        }
    }
    emit(args.out.as_deref(), &to_json(&records)?)?;
    Ok(EXIT_OK)
}

#[derive(Serialize)]
struct Plan<'a> {
    study: Study,
    family: Family,
    seed: u64,
    replicates: usize,
    cells: Vec<(usize, usize)>,
    config: &'a SimulateConfig,
}

pub fn cmd_simulate(args: &SimulateArgs) -> Result<i32> {
    let mut cfg: SimulateConfig = match &args.config {
        Some(p) => load_json(p)?,
        None => SimulateConfig::default(),
    };
    if let Some(f) = args.family {
        cfg.family = f;
    }
    if args.seed.is_some() {
        cfg.seed = args.seed;
    }
    if args.show_config {
        print!("{}", to_json(&cfg)?);
        return Ok(EXIT_OK);
    }
    let seed = resolve_seed(cfg.seed);
    cfg.seed = Some(seed);
    let designs = cfg.designs(seed)?;
    let opts = cfg.options(args.jobs)?;
    if args.dry_run {
        let plan = Plan {
            study: cfg.study,
            family: cfg.family,
            seed,
            replicates: cfg.replicates,
            cells: cfg.cells(),
            config: &cfg,
        };
        print!("{}", to_json(&plan)?);
        return Ok(EXIT_OK);
    }
    fs::create_dir_all(&args.out).map_err(|e| PqlError::Io(format!("{}: {e}", args.out.display())))?;
    match cfg.study {
        Study::Coverage | Study::GapNormality => {
            let mut reports = Vec::with_capacity(designs.len());
            for d in &designs {
                let r = if cfg.study == Study::Coverage {
                    run_coverage_experiment(d, &cfg.solver, &opts)?
                } else {
                    run_gap_normality_study(d, &cfg.solver, &opts)?
                };
                eprintln!(
                    "(m, n) = ({}, {}): {} of {} replicates converged in {:.1?}",
                    d.m, d.n, r.replicates_used, r.replicates, r.wall_time
                );
                reports.push(r);
            }
            let stem = if cfg.study == Study::Coverage { "coverage" } else { "gap_normality" };
            write_reports(&reports, &args.out.join(format!("{stem}.csv")), &args.out.join(format!("{stem}.json")))?;
        }
        Study::Frobenius => {
            let cells = frobenius_table(&designs, &cfg.solver, &cfg.g_modes, args.jobs)?;
            let mut w = csv::Writer::from_writer(Vec::new());
            for c in &cells {
                w.serialize(c).map_err(|e| PqlError::Io(format!("csv: {e}")))?;
            }
            let bytes = w.into_inner().map_err(|e| PqlError::Io(format!("csv: {e}")))?;
            let csv_path = args.out.join("frobenius.csv");
            fs::write(&csv_path, bytes).map_err(|e| PqlError::Io(format!("{}: {e}", csv_path.display())))?;
            emit(Some(&args.out.join("frobenius.json")), &to_json(&cells)?)?;
        }
    }
    Ok(EXIT_OK)
}
