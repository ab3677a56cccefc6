use std::collections::{BTreeMap, BTreeSet};
use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::generate::{generate, SimDesign, SimModel, SimRegime, SimReplicate};
use super::shapiro::shapiro_wilk;
use crate::error::{PqlError, Result};
use crate::inference::{
    conditional_interval_at, gap_mixture_spec, linear_predictor_interval_at, normal_quantile,
    prediction_gap_interval_at, quantile_sorted, unconditional_fixed_interval, InferenceSettings, IntervalResult,
    Regime, TargetSelection,
};
use crate::linalg;
use crate::rng::{item_stream, Purpose};
use crate::solver::{estimate_dispersion, fit_pql, sample_covariance, GUpdateMode, PqlFit, SolverConfig};

/// Quantities whose coverage is tracked.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimTarget {
    /// Every fixed-effect component.
    Beta,
    /// Every random-effect component of the first cluster.
    B1,
    /// `a'(beta + b_1)` with `a` the first covariate row of cluster 1.
    LinearPredictor,
}

impl SimTarget {
    pub fn key(self) -> &'static str {
        match self {
            SimTarget::Beta => "beta",
            SimTarget::B1 => "b1",
            SimTarget::LinearPredictor => "lp1",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentOptions {
    pub targets: Vec<SimTarget>,
    pub level: f64,
    /// Regime for unconditional random-effect intervals.
    pub gap_regime: Regime,
    /// Evaluate plug-in matrices at the generating values (coverage
    /// intervals) instead of the estimates (confidence intervals).
    pub use_true_params: bool,
    /// Starting (or, in fixed mode, working) G; identity when absent.
    pub init_g: Option<DMatrix<f64>>,
    pub inference: InferenceSettings,
    /// Worker threads; 0 uses all cores. Never changes results.
    #[serde(skip)]
    pub jobs: usize,
}

impl Default for ExperimentOptions {
    fn default() -> Self {
        ExperimentOptions {
            targets: vec![SimTarget::Beta, SimTarget::B1],
            level: 0.95,
            gap_regime: Regime::Auto,
            use_true_params: true,
            init_g: None,
            inference: InferenceSettings::default(),
            jobs: 0,
        }
    }
}

/// Summary of `sqrt(n)(b_hat_1 - b_1)` for one component.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapStats {
    pub variance: f64,
    pub excess_kurtosis: f64,
    pub shapiro_p: Option<f64>,
    pub mixn_coverage: f64,
    pub naive_coverage: f64,
    pub mean_mixn_halfwidth: f64,
    pub mean_naive_halfwidth: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub family: String,
    pub model: SimModel,
    pub m: usize,
    pub n: usize,
    pub regime: SimRegime,
    pub replicates: usize,
    pub seed: u64,
    pub level: f64,
    /// Keyed `<target>_<component>` with 1-based components.
    pub coverage: BTreeMap<String, f64>,
    /// Shapiro-Wilk p-values of the estimation errors across replicates,
    /// one per component, keyed by target.
    pub shapiro_p: BTreeMap<String, Vec<Option<f64>>>,
    pub frobenius_mean: f64,
    pub bias: BTreeMap<String, f64>,
    pub replicates_used: usize,
    pub dropped: usize,
    pub drop_rate: f64,
    /// Distinct generating random-effect vectors across replicates.
    pub distinct_truths: usize,
    /// Largest `||sum_i b_hat_i||_inf` over converged replicates of a
    /// partnered design.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_abs_b_sum: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gap: Option<BTreeMap<String, GapStats>>,
    #[serde(skip)]
    pub wall_time: Duration,
}

impl ExperimentReport {
    /// Mean `|coverage - level|` over the components of `target`.
    pub fn coverage_error(&self, target: SimTarget) -> Option<f64> {
        let prefix = format!("{}_", target.key());
        let errs: Vec<f64> = self
            .coverage
            .iter()
            .filter(|(k, _)| k.starts_with(&prefix))
            .map(|(_, c)| (c - self.level).abs())
            .collect();
        (!errs.is_empty()).then(|| errs.iter().sum::<f64>() / errs.len() as f64)
    }
}

pub(crate) fn run_indexed<T: Send>(count: usize, jobs: usize, f: impl Fn(u64) -> T + Sync + Send) -> Result<Vec<T>> {
    let work = || (0..count as u64).into_par_iter().map(&f).collect::<Vec<T>>();
    if jobs == 0 {
        Ok(work())
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build()
            .map_err(|e| PqlError::InvalidArgument(format!("cannot start {jobs} worker threads: {e}")))?;
        Ok(pool.install(work))
    }
}

fn truth_hash(b: &[DVector<f64>]) -> [u8; 32] {
    let mut h = Sha256::new();
    for v in b {
        for x in v.iter() {
            h.update(x.to_le_bytes());
        }
    }
    h.finalize().into()
}

fn fit_replicate(sim: &SimDesign, rep: &SimReplicate, config: &SolverConfig, init_g: &DMatrix<f64>) -> Result<PqlFit> {
    fit_pql(&rep.design, sim.family, config, init_g, 1.0)
}

/// Frobenius distance of the fit's G estimate to the truth. Under a fixed
/// working matrix the estimate is the sample covariance of the predicted
/// random effects, not the working matrix itself.
fn g_estimate(fit: &PqlFit, config: &SolverConfig) -> DMatrix<f64> {
    match config.g_update_mode {
        GUpdateMode::SampleCov => fit.g_hat.clone(),
        GUpdateMode::Fixed => sample_covariance(&fit.theta),
    }
}

struct Outcome {
    converged: bool,
    hash: [u8; 32],
    frobenius: f64,
    b_sum: Option<f64>,
    /// (key, covered, estimate - truth)
    records: Vec<(String, bool, f64)>,
}

fn key(target: SimTarget, k: usize) -> String {
    format!("{}_{}", target.key(), k + 1)
}

fn check_targets(sim: &SimDesign, opts: &ExperimentOptions) -> Result<()> {
    let fixed_part = sim.p_f() > 0;
    for t in &opts.targets {
        let ok = match (t, sim.regime) {
            (SimTarget::Beta, _) | (SimTarget::LinearPredictor, _) => fixed_part,
            (SimTarget::B1, SimRegime::Conditional) => fixed_part,
            (SimTarget::B1, SimRegime::Unconditional) => true,
        };
        if !ok {
            return Err(PqlError::Unsupported(format!(
                "target '{}' needs a partnered fixed part in the {:?} regime",
                t.key(),
                sim.regime
            )));
        }
    }
    if opts.targets.is_empty() {
        return Err(PqlError::InvalidArgument("no targets requested".into()));
    }
    Ok(())
}

fn replicate_outcome(sim: &SimDesign, config: &SolverConfig, opts: &ExperimentOptions, idx: u64) -> Result<Outcome> {
    let rep = generate(sim, idx)?;
    let init_g = opts.init_g.clone().unwrap_or_else(|| DMatrix::identity(sim.p_r(), sim.p_r()));
    let fit = fit_replicate(sim, &rep, config, &init_g)?;
    let hash = truth_hash(&rep.truth.b);
    let frobenius = linalg::frobenius(&g_estimate(&fit, config), &sim.g_true);
    let b_sum = rep.design.partnered().then(|| fit.theta.b_sum().amax());
    if !fit.converged {
        return Ok(Outcome { converged: false, hash, frobenius, b_sum, records: Vec::new() });
    }
    let design = &rep.design;
    let truth = &rep.truth;
    let p = sim.p_r();
    let m = sim.m as f64;
    let mean_b = truth.b.iter().fold(DVector::zeros(p), |acc, b| acc + b) / m;
    let phi = if opts.use_true_params { sim.phi_true } else { estimate_dispersion(design, &fit, sim.family)? };
    let g_inf = if opts.use_true_params { sim.g_true.clone() } else { fit.g_hat.clone() };
    let beta_eval = if opts.use_true_params { truth.beta.clone() } else { fit.theta.beta.clone() };
    let eval_theta = if opts.use_true_params { truth } else { &fit.theta };
    let mix_seed: u64 = item_stream(sim.seed, idx, Purpose::MixtureDraws).random();
    let lp_a: DVector<f64> = design.clusters()[0].x.row(0).transpose().into_owned();

    let mut records = Vec::new();
    let mut push = |key: String, iv: &IntervalResult, truth_value: f64| {
        records.push((key, iv.covers(truth_value), iv.estimate - truth_value));
    };
    for &t in &opts.targets {
        match (t, sim.regime) {
            (SimTarget::Beta, SimRegime::Conditional) => {
                for k in 0..sim.p_f() {
                    let sel = TargetSelection::fixed_effect(k, sim.p_f());
                    let iv = conditional_interval_at(design, &fit, eval_theta, phi, &sel, opts.level)?;
                    push(key(t, k), &iv, truth.beta[k] + mean_b[k]);
                }
            }
            (SimTarget::Beta, SimRegime::Unconditional) => {
                for k in 0..sim.p_f() {
                    let sel = TargetSelection::fixed_effect(k, sim.p_f());
                    let iv = unconditional_fixed_interval(design, &fit, &sel, opts.level, &g_inf)?;
                    push(key(t, k), &iv, truth.beta[k]);
                }
            }
            (SimTarget::B1, SimRegime::Conditional) => {
                for k in 0..p {
                    let sel = TargetSelection::random_effect(0, k, p);
                    let iv = conditional_interval_at(design, &fit, eval_theta, phi, &sel, opts.level)?;
                    push(key(t, k), &iv, truth.b[0][k] - mean_b[k]);
                }
            }
            (SimTarget::B1, SimRegime::Unconditional) => {
                let ivs = prediction_gap_interval_at(
                    design,
                    &fit,
                    &beta_eval,
                    phi,
                    0,
                    None,
                    opts.level,
                    opts.gap_regime,
                    &g_inf,
                    &opts.inference,
                    mix_seed,
                )?;
                for (k, iv) in ivs.iter().enumerate() {
                    push(key(t, k), iv, truth.b[0][k]);
                }
            }
            (SimTarget::LinearPredictor, regime) => {
                let value = lp_a.dot(&(&truth.beta + &truth.b[0]));
                let iv = if regime == SimRegime::Conditional {
                    let sel = TargetSelection::linear_combo(0, lp_a.clone());
                    conditional_interval_at(design, &fit, eval_theta, phi, &sel, opts.level)?
                } else {
                    linear_predictor_interval_at(
                        design,
                        &fit,
                        &beta_eval,
                        phi,
                        0,
                        &lp_a,
                        opts.level,
                        &g_inf,
                        &opts.inference,
                        mix_seed,
                    )?
                };
                push(key(t, 0), &iv, value);
            }
        }
    }
    Ok(Outcome { converged: true, hash, frobenius, b_sum, records })
}

fn empty_report(sim: &SimDesign, level: f64) -> ExperimentReport {
    ExperimentReport {
        family: sim.family.name().to_string(),
        model: sim.model,
        m: sim.m,
        n: sim.n,
        regime: sim.regime,
        replicates: sim.replicates,
        seed: sim.seed,
        level,
        coverage: BTreeMap::new(),
        shapiro_p: BTreeMap::new(),
        frobenius_mean: f64::NAN,
        bias: BTreeMap::new(),
        replicates_used: 0,
        dropped: 0,
        drop_rate: 0.0,
        distinct_truths: 0,
        max_abs_b_sum: None,
        gap: None,
        wall_time: Duration::ZERO,
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Fits every replicate, builds the requested intervals and aggregates
/// coverage. Non-converged replicates are dropped and counted.
pub fn run_coverage_experiment(
    sim: &SimDesign,
    config: &SolverConfig,
    opts: &ExperimentOptions,
) -> Result<ExperimentReport> {
    let start = Instant::now();
    sim.validate()?;
    config.validate()?;
    opts.inference.validate()?;
    if !(opts.level > 0.0 && opts.level < 1.0) {
        return Err(PqlError::InvalidArgument(format!("level must lie in (0, 1), got {}", opts.level)));
    }
    check_targets(sim, opts)?;
    let outcomes = run_indexed(sim.replicates, opts.jobs, |i| replicate_outcome(sim, config, opts, i))?
        .into_iter()
        .collect::<Result<Vec<_>>>()?;

    let mut report = empty_report(sim, opts.level);
    report.distinct_truths = outcomes.iter().map(|o| o.hash).collect::<BTreeSet<_>>().len();
    let used: Vec<&Outcome> = outcomes.iter().filter(|o| o.converged).collect();
    report.replicates_used = used.len();
    report.dropped = outcomes.len() - used.len();
    report.drop_rate = report.dropped as f64 / outcomes.len() as f64;
    if used.is_empty() {
        report.wall_time = start.elapsed();
        return Ok(report);
    }
    report.frobenius_mean = mean(&used.iter().map(|o| o.frobenius).collect::<Vec<_>>());
    report.max_abs_b_sum = used.iter().filter_map(|o| o.b_sum).reduce(f64::max);

    let mut hits: BTreeMap<String, (usize, Vec<f64>)> = BTreeMap::new();
    for o in &used {
        for (k, covered, err) in &o.records {
            let e = hits.entry(k.clone()).or_default();
            e.0 += usize::from(*covered);
            e.1.push(*err);
        }
    }
    for (k, (count, errs)) in &hits {
        report.coverage.insert(k.clone(), *count as f64 / errs.len() as f64);
        report.bias.insert(k.clone(), mean(errs));
    }
    for t in &opts.targets {
        let prefix = format!("{}_", t.key());
        let ps = hits
            .iter()
            .filter(|(k, _)| k.starts_with(&prefix))
            .map(|(_, (_, errs))| shapiro_wilk(errs).ok().map(|r| r.p_value))
            .collect();
        report.shapiro_p.insert(t.key().to_string(), ps);
    }
    report.wall_time = start.elapsed();
    Ok(report)
}

struct GapOutcome {
    converged: bool,
    hash: [u8; 32],
    frobenius: f64,
    b_sum: Option<f64>,
    /// Per component: (scaled gap, mixN covers, naive covers, mixN halfwidth, naive halfwidth)
    comps: Vec<(f64, bool, bool, f64, f64)>,
}

fn gap_outcome(sim: &SimDesign, config: &SolverConfig, opts: &ExperimentOptions, idx: u64) -> Result<GapOutcome> {
    let rep = generate(sim, idx)?;
    let init_g = opts.init_g.clone().unwrap_or_else(|| DMatrix::identity(sim.p_r(), sim.p_r()));
    let fit = fit_replicate(sim, &rep, config, &init_g)?;
    let hash = truth_hash(&rep.truth.b);
    let frobenius = linalg::frobenius(&g_estimate(&fit, config), &sim.g_true);
    let b_sum = rep.design.partnered().then(|| fit.theta.b_sum().amax());
    if !fit.converged {
        return Ok(GapOutcome { converged: false, hash, frobenius, b_sum, comps: Vec::new() });
    }
    let design = &rep.design;
    let c = &design.clusters()[0];
    let n1 = c.n() as f64;
    let phi = if opts.use_true_params { sim.phi_true } else { estimate_dispersion(design, &fit, sim.family)? };
    let g_inf = if opts.use_true_params { sim.g_true.clone() } else { fit.g_hat.clone() };
    let beta_eval = if opts.use_true_params { rep.truth.beta.clone() } else { fit.theta.beta.clone() };
    let regime = opts.gap_regime.resolve(sim.m, c.n(), &opts.inference)?;
    let spec = gap_mixture_spec(c, sim.family, &beta_eval, phi, 0, &g_inf, regime, opts.inference.n_draws)?;
    let mix_seed: u64 = item_stream(sim.seed, idx, Purpose::MixtureDraws).random();
    let draws = spec.draws(mix_seed)?;
    let alpha = 1.0 - opts.level;
    let z = normal_quantile(1.0 - alpha / 2.0);
    let b_hat = &fit.theta.b[0];
    let b_true = &rep.truth.b[0];
    let comps = (0..sim.p_r())
        .map(|k| {
            let mut v: Vec<f64> = draws.row(k).iter().copied().collect();
            v.sort_by(f64::total_cmp);
            let (q_lo, q_hi) = (quantile_sorted(&v, alpha / 2.0), quantile_sorted(&v, 1.0 - alpha / 2.0));
            let (lo, hi) = (b_hat[k] - q_hi / n1.sqrt(), b_hat[k] - q_lo / n1.sqrt());
            let sd = sample_variance(&v).sqrt();
            let naive_half = z * sd / n1.sqrt();
            let covered = lo <= b_true[k] && b_true[k] <= hi;
            let naive = (b_hat[k] - b_true[k]).abs() <= naive_half;
            (n1.sqrt() * (b_hat[k] - b_true[k]), covered, naive, 0.5 * (hi - lo), naive_half)
        })
        .collect();
    Ok(GapOutcome { converged: true, hash, frobenius, b_sum, comps })
}

pub fn sample_variance(v: &[f64]) -> f64 {
    let mu = mean(v);
    v.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / (v.len() as f64 - 1.0)
}

/// `m4 / m2^2 - 3` with population central moments.
pub fn excess_kurtosis(v: &[f64]) -> f64 {
    let mu = mean(v);
    let m2 = v.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / v.len() as f64;
    let m4 = v.iter().map(|x| (x - mu).powi(4)).sum::<f64>() / v.len() as f64;
    m4 / (m2 * m2) - 3.0
}

/// Distribution of `sqrt(n_1)(b_hat_1 - b_1)` across unconditional
/// replicates, with mixture-based and naive-normal interval coverage. The
/// naive interval uses the mixture's variance in a normal law.
pub fn run_gap_normality_study(
    sim: &SimDesign,
    config: &SolverConfig,
    opts: &ExperimentOptions,
) -> Result<ExperimentReport> {
    let start = Instant::now();
    sim.validate()?;
    config.validate()?;
    opts.inference.validate()?;
    if sim.regime != SimRegime::Unconditional {
        return Err(PqlError::InvalidArgument("the gap study needs the unconditional regime".into()));
    }
    if !(opts.level > 0.0 && opts.level < 1.0) {
        return Err(PqlError::InvalidArgument(format!("level must lie in (0, 1), got {}", opts.level)));
    }
    let outcomes = run_indexed(sim.replicates, opts.jobs, |i| gap_outcome(sim, config, opts, i))?
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let mut report = empty_report(sim, opts.level);
    report.distinct_truths = outcomes.iter().map(|o| o.hash).collect::<BTreeSet<_>>().len();
    let used: Vec<&GapOutcome> = outcomes.iter().filter(|o| o.converged).collect();
    report.replicates_used = used.len();
    report.dropped = outcomes.len() - used.len();
    report.drop_rate = report.dropped as f64 / outcomes.len() as f64;
    if used.is_empty() {
        report.wall_time = start.elapsed();
        return Ok(report);
    }
    report.frobenius_mean = mean(&used.iter().map(|o| o.frobenius).collect::<Vec<_>>());
    report.max_abs_b_sum = used.iter().filter_map(|o| o.b_sum).reduce(f64::max);
    let r = used.len() as f64;
    let mut gap = BTreeMap::new();
    let mut ps = Vec::new();
    for k in 0..sim.p_r() {
        let name = key(SimTarget::B1, k);
        let scaled: Vec<f64> = used.iter().map(|o| o.comps[k].0).collect();
        let frac = |f: &dyn Fn(&(f64, bool, bool, f64, f64)) -> bool| used.iter().filter(|o| f(&o.comps[k])).count() as f64 / r;
        let stats = GapStats {
            variance: if scaled.len() > 1 { sample_variance(&scaled) } else { f64::NAN },
            excess_kurtosis: excess_kurtosis(&scaled),
            shapiro_p: shapiro_wilk(&scaled).ok().map(|s| s.p_value),
            mixn_coverage: frac(&|c| c.1),
            naive_coverage: frac(&|c| c.2),
            mean_mixn_halfwidth: mean(&used.iter().map(|o| o.comps[k].3).collect::<Vec<_>>()),
            mean_naive_halfwidth: mean(&used.iter().map(|o| o.comps[k].4).collect::<Vec<_>>()),
        };
        ps.push(stats.shapiro_p);
        report.coverage.insert(name.clone(), stats.mixn_coverage);
        report.bias.insert(name.clone(), mean(&scaled) / (sim.n as f64).sqrt());
        gap.insert(name, stats);
    }
    report.shapiro_p.insert(SimTarget::B1.key().to_string(), ps);
    report.gap = Some(gap);
    report.wall_time = start.elapsed();
    Ok(report)
}

/// How G is handled in a Frobenius table cell.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum GMode {
    SampleCov,
    /// Fixed working matrix `scale * I`.
    Fixed { scale: f64 },
}

impl GMode {
    pub fn label(&self) -> String {
        match self {
            GMode::SampleCov => "sample_cov".into(),
            GMode::Fixed { scale } => format!("fixed_{scale}I"),
        }
    }

    /// The fixed-matrix scales and the sample-covariance mode.
    pub fn standard() -> Vec<GMode> {
        let mut v: Vec<GMode> = [0.25, 0.5, 1.0, 2.0, 4.0].iter().map(|&scale| GMode::Fixed { scale }).collect();
        v.push(GMode::SampleCov);
        v
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrobeniusCell {
    pub family: String,
    pub m: usize,
    pub n: usize,
    pub g_mode: String,
    pub frobenius_mean: f64,
    pub frobenius_sd: f64,
    pub replicates_used: usize,
    pub dropped: usize,
}

/// Mean `||G_est - G_true||_F` per design and G mode.
pub fn frobenius_table(
    designs: &[SimDesign],
    config: &SolverConfig,
    modes: &[GMode],
    jobs: usize,
) -> Result<Vec<FrobeniusCell>> {
    let mut out = Vec::new();
    for sim in designs {
        sim.validate()?;
        for mode in modes {
            let (cfg, init_g) = match *mode {
                GMode::SampleCov => (
                    SolverConfig { g_update_mode: GUpdateMode::SampleCov, ..config.clone() },
                    DMatrix::identity(sim.p_r(), sim.p_r()),
                ),
                GMode::Fixed { scale } => {
                    if !(scale > 0.0) {
                        return Err(PqlError::InvalidArgument(format!("fixed G scale must be positive, got {scale}")));
                    }
                    (
                        SolverConfig { g_update_mode: GUpdateMode::Fixed, ..config.clone() },
                        DMatrix::identity(sim.p_r(), sim.p_r()) * scale,
                    )
                }
            };
            cfg.validate()?;
            let res = run_indexed(sim.replicates, jobs, |i| -> Result<Option<f64>> {
                let rep = generate(sim, i)?;
                let fit = fit_replicate(sim, &rep, &cfg, &init_g)?;
                Ok(fit.converged.then(|| linalg::frobenius(&g_estimate(&fit, &cfg), &sim.g_true)))
            })?
            .into_iter()
            .collect::<Result<Vec<_>>>()?;
            let vals: Vec<f64> = res.iter().flatten().copied().collect();
            out.push(FrobeniusCell {
                family: sim.family.name().to_string(),
                m: sim.m,
                n: sim.n,
                g_mode: mode.label(),
                frobenius_mean: if vals.is_empty() { f64::NAN } else { mean(&vals) },
                frobenius_sd: if vals.len() > 1 { sample_variance(&vals).sqrt() } else { f64::NAN },
                replicates_used: vals.len(),
                dropped: res.len() - vals.len(),
            });
        }
    }
    Ok(out)
}
