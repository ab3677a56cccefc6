use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::mixn::{mixn_quantiles, MixNSpec};
use super::types::{
    check_level, normal_quantile, Basis, InferenceSettings, IntervalResult, Regime, TargetKind, TargetSelection,
};
use crate::error::{PqlError, Result};
use crate::family::Family;
use crate::linalg;
use crate::pql::{cluster_eta, ClusterData, ClusteredDesign, ThetaState};
use crate::sim::shapiro_wilk;
use crate::solver::{estimate_dispersion, PqlFit};

/// `n_i^-1 Z_i' W Z_i` with `W = trials * a''(eta) / phi`.
fn scaled_information(family: Family, c: &ClusterData, eta: &DVector<f64>, phi: f64) -> DMatrix<f64> {
    let n = c.n();
    let mut zw = c.z.clone();
    for j in 0..n {
        let (_, a2, _) = family.derivs_unchecked(eta[j]);
        let w = c.trials_at(j) * a2 / phi;
        zw.row_mut(j).scale_mut(w);
    }
    linalg::symmetrize(&(c.z.transpose() * zw / n as f64))
}

fn invert_information(info: &DMatrix<f64>, cluster: usize) -> Result<DMatrix<f64>> {
    linalg::spd_inverse(info).ok_or_else(|| {
        PqlError::Numerical(format!("information matrix of cluster {cluster} is singular (collinear cluster design?)"))
    })
}

fn check_phi(phi: f64) -> Result<()> {
    if phi > 0.0 && phi.is_finite() {
        Ok(())
    } else {
        Err(PqlError::InvalidArgument(format!("dispersion must be positive, got {phi}")))
    }
}

fn require_partnered(design: &ClusteredDesign) -> Result<()> {
    if design.partnered() {
        Ok(())
    } else {
        Err(PqlError::Unsupported("inference requires partnered fixed and random effects (X_i = Z_i)".into()))
    }
}

/// Partnered design, or the pure random-effects model with no fixed part.
fn require_partnered_or_pure(design: &ClusteredDesign) -> Result<()> {
    if design.partnered() || design.p_f() == 0 {
        Ok(())
    } else {
        require_partnered(design)
    }
}

fn check_cluster(design: &ClusteredDesign, i: usize) -> Result<&ClusterData> {
    design.cluster(i)
}

fn convergence_warnings(fit: &PqlFit) -> Vec<String> {
    if fit.converged {
        Vec::new()
    } else {
        vec!["fit did not converge; interval is unreliable".to_string()]
    }
}

/// `H_i = (n_i^-1 Z_i' W_i Z_i)^-1` evaluated at `theta` and `phi`.
pub fn plug_in_k_at(
    design: &ClusteredDesign,
    family: Family,
    theta: &ThetaState,
    cluster_index: usize,
    phi: f64,
) -> Result<DMatrix<f64>> {
    check_phi(phi)?;
    theta.check_dims(design)?;
    let c = check_cluster(design, cluster_index)?;
    let eta = cluster_eta(c, &theta.beta, &theta.b[cluster_index]);
    invert_information(&scaled_information(family, c, &eta, phi), cluster_index)
}

/// Plug-in `H_i` at the fitted values.
pub fn plug_in_k(design: &ClusteredDesign, fit: &PqlFit, cluster_index: usize, dispersion: f64) -> Result<DMatrix<f64>> {
    if !fit.converged {
        return Err(PqlError::InvalidArgument("plug-in K requires a converged fit".into()));
    }
    plug_in_k_at(design, fit.family, &fit.theta, cluster_index, dispersion)
}

fn check_coeffs(target: &TargetSelection, p: usize) -> Result<()> {
    if target.coeffs.len() != p {
        return Err(PqlError::Dimension(format!("target coefficients have length {}, expected {p}", target.coeffs.len())));
    }
    // unit() leaves an out-of-range component as the zero vector
    if target.coeffs.iter().all(|v| *v == 0.0) {
        return Err(PqlError::InvalidArgument("target coefficients are all zero".into()));
    }
    Ok(())
}

fn target_estimate(fit_theta: &ThetaState, target: &TargetSelection) -> Result<f64> {
    let a = &target.coeffs;
    let need_cluster = || {
        target.cluster_index.ok_or_else(|| PqlError::InvalidArgument("target needs a cluster index".into()))
    };
    Ok(match target.kind {
        TargetKind::FixedEffect => a.dot(&fit_theta.beta),
        TargetKind::RandomEffect => a.dot(&fit_theta.b[need_cluster()?]),
        TargetKind::LinearCombo => {
            let i = need_cluster()?;
            a.dot(&(&fit_theta.beta + &fit_theta.b[i]))
        }
    })
}

fn symmetric_interval(
    target: &TargetSelection,
    estimate: f64,
    se: f64,
    level: f64,
    regime: Regime,
    warnings: Vec<String>,
) -> IntervalResult {
    let half = normal_quantile(0.5 + level / 2.0) * se;
    IntervalResult {
        target: target.label(),
        estimate,
        lower: estimate - half,
        upper: estimate + half,
        level,
        basis: Basis::Normal,
        regime,
        warnings,
    }
}

/// Conditional-regime normal interval with plug-ins evaluated at `eval`
/// (the fit itself, or true values in a simulation).
pub fn conditional_interval_at(
    design: &ClusteredDesign,
    fit: &PqlFit,
    eval: &ThetaState,
    phi: f64,
    target: &TargetSelection,
    level: f64,
) -> Result<IntervalResult> {
    check_level(level)?;
    require_partnered(design)?;
    let p = design.p_r();
    check_coeffs(target, p)?;
    if let Some(i) = target.cluster_index {
        check_cluster(design, i)?;
    }
    let estimate = target_estimate(&fit.theta, target)?;
    let a = &target.coeffs;
    let var = match target.kind {
        TargetKind::FixedEffect => {
            // N^-1 m^-1 sum_i (n / n_i) H_i with n = N / m reduces to m^-2 sum_i H_i / n_i.
            let m = design.m() as f64;
            let mut acc = 0.0;
            for (i, c) in design.clusters().iter().enumerate() {
                let h = plug_in_k_at(design, fit.family, eval, i, phi)?;
                acc += quad(&h, a) / c.n() as f64;
            }
            acc / (m * m)
        }
        TargetKind::RandomEffect | TargetKind::LinearCombo => {
            let i = target.cluster_index.ok_or_else(|| PqlError::InvalidArgument("target needs a cluster index".into()))?;
            let h = plug_in_k_at(design, fit.family, eval, i, phi)?;
            quad(&h, a) / design.clusters()[i].n() as f64
        }
    };
    Ok(symmetric_interval(target, estimate, var.max(0.0).sqrt(), level, Regime::Conditional, convergence_warnings(fit)))
}

/// Conditional-regime interval at the fitted values with the estimated
/// dispersion.
///
/// Under partnering the fitted random effects sum to zero, so these
/// intervals cover `beta + mean(b)` and `b_i - mean(b)` rather than the
/// raw parameters.
pub fn conditional_interval(
    design: &ClusteredDesign,
    fit: &PqlFit,
    target: &TargetSelection,
    level: f64,
) -> Result<IntervalResult> {
    let phi = estimate_dispersion(design, fit, fit.family)?;
    conditional_interval_at(design, fit, &fit.theta, phi, target, level)
}

/// Unconditional fixed-effect interval `a'beta_hat +/- z sqrt(a'Ga / m)`.
pub fn unconditional_fixed_interval(
    design: &ClusteredDesign,
    fit: &PqlFit,
    target: &TargetSelection,
    level: f64,
    g_for_inference: &DMatrix<f64>,
) -> Result<IntervalResult> {
    check_level(level)?;
    require_partnered(design)?;
    if target.kind != TargetKind::FixedEffect {
        return Err(PqlError::InvalidArgument("unconditional fixed-effect interval needs a fixed-effect target".into()));
    }
    check_coeffs(target, design.p_f())?;
    if g_for_inference.shape() != (design.p_r(), design.p_r()) {
        return Err(PqlError::Dimension("G for inference has the wrong shape".into()));
    }
    let m = design.m();
    let mut warnings = convergence_warnings(fit);
    if m < 2 {
        warnings.push(format!("only {m} cluster(s): the large-m approximation does not apply"));
    }
    let var = quad(&g_for_inference, &target.coeffs) / m as f64;
    let estimate = target.coeffs.dot(&fit.theta.beta);
    Ok(symmetric_interval(target, estimate, var.max(0.0).sqrt(), level, Regime::Unconditional, warnings))
}

fn quad(m: &DMatrix<f64>, a: &DVector<f64>) -> f64 {
    a.dot(&(m * a))
}

/// Conditional covariance `(n_i^-1 Z_i' W(b) Z_i)^-1` with
/// `eta = X_i beta + Z_i b`.
fn gap_cond_cov<'a>(
    c: &'a ClusterData,
    family: Family,
    beta: &'a DVector<f64>,
    phi: f64,
    cluster: usize,
) -> impl Fn(&DVector<f64>) -> Result<DMatrix<f64>> + Sync + 'a {
    move |b: &DVector<f64>| {
        let eta = cluster_eta(c, beta, b);
        invert_information(&scaled_information(family, c, &eta, phi), cluster)
    }
}

/// Limiting law of `sqrt(n_i) (b_hat_i - b_i)` for the many-clusters case
/// (`regime` = `UncondManyClusters`) or the balanced case, which adds the
/// independent `N(0, G / gamma)` term.
#[allow(clippy::too_many_arguments)]
pub fn gap_mixture_spec<'a>(
    c: &'a ClusterData,
    family: Family,
    beta_eval: &'a DVector<f64>,
    phi: f64,
    cluster_index: usize,
    g: &DMatrix<f64>,
    regime: Regime,
    n_draws: usize,
) -> Result<MixNSpec<'a>> {
    let spec = MixNSpec::new(gap_cond_cov(c, family, beta_eval, phi, cluster_index), g.clone(), n_draws);
    match regime {
        Regime::UncondManyClusters => Ok(spec),
        Regime::UncondBalanced { gamma } => Ok(spec.with_extra_normal(g / gamma)),
        other => Err(PqlError::Unsupported(format!("regime '{other}' has no mixture limit"))),
    }
}

/// Prediction-gap intervals for `b_i` under the unconditional regime, with
/// `beta` and `g` used inside the mixture (fitted or true values).
/// Returns one interval per component, or just `component` if given.
#[allow(clippy::too_many_arguments)]
pub fn prediction_gap_interval_at(
    design: &ClusteredDesign,
    fit: &PqlFit,
    beta_eval: &DVector<f64>,
    phi: f64,
    cluster_index: usize,
    component: Option<usize>,
    level: f64,
    regime: Regime,
    g_for_inference: &DMatrix<f64>,
    settings: &InferenceSettings,
    seed: u64,
) -> Result<Vec<IntervalResult>> {
    check_level(level)?;
    check_phi(phi)?;
    settings.validate()?;
    require_partnered_or_pure(design)?;
    let c = check_cluster(design, cluster_index)?;
    let p = design.p_r();
    if g_for_inference.shape() != (p, p) {
        return Err(PqlError::Dimension("G for inference has the wrong shape".into()));
    }
    if beta_eval.len() != design.p_f() {
        return Err(PqlError::Dimension("beta has the wrong length".into()));
    }
    if let Some(k) = component {
        if k >= p {
            return Err(PqlError::InvalidArgument(format!("component {} out of range 1..={p}", k + 1)));
        }
    }
    let n_i = c.n();
    let resolved = regime.resolve(design.m(), n_i, settings)?;
    let b_hat = &fit.theta.b[cluster_index];
    let comps: Vec<usize> = component.map_or_else(|| (0..p).collect(), |k| vec![k]);
    let alpha = 1.0 - level;
    let probs = [alpha / 2.0, 1.0 - alpha / 2.0];
    let mut warnings = convergence_warnings(fit);

    let (bounds, basis): (Vec<(f64, f64)>, Basis) = match resolved {
        Regime::UncondManyClusters | Regime::UncondBalanced { .. } => {
            let spec = gap_mixture_spec(c, fit.family, beta_eval, phi, cluster_index, g_for_inference, resolved, settings.n_draws)?;
            let basis = if spec.extra_normal_cov.is_some() { Basis::Convolution } else { Basis::MixN };
            let q = mixn_quantiles(&spec, &probs, seed)?;
            let root_n = (n_i as f64).sqrt();
            // b_hat - b ~ n^-1/2 V, so b lies in [b_hat - q_hi / sqrt(n), b_hat - q_lo / sqrt(n)].
            (comps.iter().map(|&k| (b_hat[k] - q[k][1] / root_n, b_hat[k] - q[k][0] / root_n)).collect(), basis)
        }
        Regime::UncondLargeClusters => {
            let z = normal_quantile(probs[1]);
            let m = design.m() as f64;
            (
                comps
                    .iter()
                    .map(|&k| {
                        let half = z * (g_for_inference[(k, k)].max(0.0) / m).sqrt();
                        (b_hat[k] - half, b_hat[k] + half)
                    })
                    .collect(),
                Basis::Normal,
            )
        }
        other => {
            return Err(PqlError::Unsupported(format!("regime '{other}' does not apply to prediction gaps")));
        }
    };
    if n_i < 2 {
        warnings.push("cluster has a single observation".into());
    }
    Ok(comps
        .iter()
        .zip(bounds)
        .map(|(&k, (lower, upper))| IntervalResult {
            target: TargetSelection::random_effect(cluster_index, k, p).label(),
            estimate: b_hat[k],
            lower,
            upper,
            level,
            basis,
            regime: resolved,
            warnings: warnings.clone(),
        })
        .collect())
}

/// Prediction-gap intervals at the fitted `beta` with the estimated
/// dispersion.
#[allow(clippy::too_many_arguments)]
pub fn prediction_gap_interval(
    design: &ClusteredDesign,
    fit: &PqlFit,
    cluster_index: usize,
    component: Option<usize>,
    level: f64,
    regime: Regime,
    g_for_inference: &DMatrix<f64>,
    settings: &InferenceSettings,
    seed: u64,
) -> Result<Vec<IntervalResult>> {
    let phi = estimate_dispersion(design, fit, fit.family)?;
    prediction_gap_interval_at(
        design,
        fit,
        &fit.theta.beta,
        phi,
        cluster_index,
        component,
        level,
        regime,
        g_for_inference,
        settings,
        seed,
    )
}

/// Interval for `a'(beta + b_i)` from the scalar mixture
/// `mixN(0, a'K_i(b)a, N(0, G))` scaled by `n_i^-1/2`.
#[allow(clippy::too_many_arguments)]
pub fn linear_predictor_interval_at(
    design: &ClusteredDesign,
    fit: &PqlFit,
    beta_eval: &DVector<f64>,
    phi: f64,
    cluster_index: usize,
    a: &DVector<f64>,
    level: f64,
    g_for_inference: &DMatrix<f64>,
    settings: &InferenceSettings,
    seed: u64,
) -> Result<IntervalResult> {
    check_level(level)?;
    check_phi(phi)?;
    settings.validate()?;
    require_partnered(design)?;
    let c = check_cluster(design, cluster_index)?;
    let p = design.p_r();
    if a.len() != p {
        return Err(PqlError::Dimension(format!("a has length {}, expected {p}", a.len())));
    }
    if g_for_inference.shape() != (p, p) || beta_eval.len() != p {
        return Err(PqlError::Dimension("G or beta has the wrong shape".into()));
    }
    let k_fn = gap_cond_cov(c, fit.family, beta_eval, phi, cluster_index);
    let spec = MixNSpec::new(
        move |b: &DVector<f64>| Ok(DMatrix::from_element(1, 1, quad(&k_fn(b)?, a))),
        g_for_inference.clone(),
        settings.n_draws,
    );
    let alpha = 1.0 - level;
    let q = &mixn_quantiles(&spec, &[alpha / 2.0, 1.0 - alpha / 2.0], seed)?[0];
    let target = TargetSelection::linear_combo(cluster_index, a.clone());
    let estimate = target_estimate(&fit.theta, &target)?;
    let root_n = (c.n() as f64).sqrt();
    Ok(IntervalResult {
        target: target.label(),
        estimate,
        lower: estimate - q[1] / root_n,
        upper: estimate - q[0] / root_n,
        level,
        basis: Basis::MixN,
        regime: Regime::UncondManyClusters,
        warnings: convergence_warnings(fit),
    })
}

#[allow(clippy::too_many_arguments)]
pub fn linear_predictor_interval(
    design: &ClusteredDesign,
    fit: &PqlFit,
    cluster_index: usize,
    a: &DVector<f64>,
    level: f64,
    g_for_inference: &DMatrix<f64>,
    settings: &InferenceSettings,
    seed: u64,
) -> Result<IntervalResult> {
    let phi = estimate_dispersion(design, fit, fit.family)?;
    linear_predictor_interval_at(design, fit, &fit.theta.beta, phi, cluster_index, a, level, g_for_inference, settings, seed)
}

/// Empirical distribution of a set of predicted random effects.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictorSummary {
    pub count: usize,
    pub mean: DVector<f64>,
    /// `|S|^-1 sum b_i b_i'`, the same form as the sample-covariance update.
    pub covariance: DMatrix<f64>,
    /// Covariance about the subset mean.
    pub centered_covariance: DMatrix<f64>,
    /// Shapiro-Wilk p-value per component; `None` when the subset is too
    /// small or the component is constant.
    pub shapiro_p: Vec<Option<f64>>,
}

pub fn predictor_distribution_check(fit: &PqlFit, subset: &[usize]) -> Result<PredictorSummary> {
    if subset.is_empty() {
        return Err(PqlError::InvalidArgument("subset of clusters is empty".into()));
    }
    let m = fit.theta.b.len();
    if let Some(bad) = subset.iter().find(|&&i| i >= m) {
        return Err(PqlError::InvalidArgument(format!("cluster index {bad} out of range (m = {m})")));
    }
    let p = fit.theta.b[subset[0]].len();
    let count = subset.len();
    let mut mean = DVector::zeros(p);
    let mut cov = DMatrix::zeros(p, p);
    for &i in subset {
        let b = &fit.theta.b[i];
        mean += b;
        cov.ger(1.0, b, b, 1.0);
    }
    mean /= count as f64;
    cov /= count as f64;
    let centered = linalg::symmetrize(&(&cov - &mean * mean.transpose()));
    let shapiro_p = (0..p)
        .map(|k| {
            let v: Vec<f64> = subset.iter().map(|&i| fit.theta.b[i][k]).collect();
            shapiro_wilk(&v).ok().map(|r| r.p_value)
        })
        .collect();
    Ok(PredictorSummary { count, mean, covariance: linalg::symmetrize(&cov), centered_covariance: centered, shapiro_p })
}
