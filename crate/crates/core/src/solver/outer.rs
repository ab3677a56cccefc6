use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::config::{GUpdateMode, SolverConfig};
use super::newton::fit_inner;
use crate::error::{PqlError, Result};
use crate::family::Family;
use crate::linalg;
use crate::pql::{cluster_eta, ClusteredDesign, ThetaState, WorkingParams};

/// Result of a PQL fit.
///
/// Under [`GUpdateMode::SampleCov`], `g_hat` is the (floored) sample
/// covariance of the returned random effects; `theta` was computed under a
/// working matrix within `g_update_tol` of it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PqlFit {
    pub family: Family,
    pub theta: ThetaState,
    pub g_hat: DMatrix<f64>,
    pub phi_hat: f64,
    pub converged: bool,
    pub newton_iters_total: usize,
    pub outer_iters: usize,
    pub final_grad_norm: f64,
    /// Objective without the `c(y, phi)` terms, at `theta`.
    pub objective: f64,
    /// Objective after each accepted Newton step of the last inner fit.
    #[serde(skip)]
    pub objective_trace: Vec<f64>,
    #[serde(default)]
    pub warnings: Vec<String>,
}

impl PqlFit {
    pub fn beta(&self) -> &nalgebra::DVector<f64> {
        &self.theta.beta
    }

    pub fn b(&self, i: usize) -> &nalgebra::DVector<f64> {
        &self.theta.b[i]
    }
}

/// `m^-1 sum_i b_i b_i'`.
pub fn sample_covariance(theta: &ThetaState) -> DMatrix<f64> {
    let m = theta.b.len();
    let p = theta.b.first().map_or(0, |b| b.len());
    let mut acc = DMatrix::zeros(p, p);
    for bi in &theta.b {
        acc.ger(1.0, bi, bi, 1.0);
    }
    linalg::symmetrize(&(acc / m as f64))
}

/// Alternates inner Newton fits with the working-covariance update until
/// the Frobenius change of G is below `g_update_tol`. Each inner fit is
/// warm-started from the previous estimate.
pub fn fit_pql(
    design: &ClusteredDesign,
    family: Family,
    config: &SolverConfig,
    init_g: &DMatrix<f64>,
    init_phi: f64,
) -> Result<PqlFit> {
    config.validate()?;
    design.check_support(family)?;
    let mut work = WorkingParams::new(init_g.clone(), init_phi)?;
    work.check_dims(design)?;

    if config.g_update_mode == GUpdateMode::Fixed {
        return fit_inner(design, &work, family, config, None);
    }

    let mut theta: Option<ThetaState> = None;
    let mut newton_total = 0;
    let mut warnings = Vec::new();
    for outer in 1..=config.max_outer_iters {
        let mut fit = fit_inner(design, &work, family, config, theta.take())?;
        newton_total += fit.newton_iters_total;
        warnings.append(&mut fit.warnings);

        let raw = sample_covariance(&fit.theta);
        let (updated, clipped) = linalg::eigen_floor(&raw, config.g_eigen_floor);
        if clipped {
            warnings.push(format!("outer iteration {outer}: updated G was floored at eigenvalue {}", config.g_eigen_floor));
        }
        let change = linalg::frobenius(&updated, work.g_hat());
        let done = change <= config.g_update_tol;

        if !fit.converged || done || outer == config.max_outer_iters {
            if !done && fit.converged {
                warnings.push(format!("G update did not converge in {outer} outer iterations (last change {change:.3e})"));
            }
            fit.converged = fit.converged && done;
            fit.g_hat = updated;
            fit.newton_iters_total = newton_total;
            fit.outer_iters = outer;
            fit.warnings = warnings;
            return Ok(fit);
        }
        work = WorkingParams::new(updated, init_phi)?;
        theta = Some(fit.theta);
    }
    unreachable!("outer loop returns on its last iteration")
}

/// Pearson dispersion estimate `sum (y - mu)^2 / Var(y) / (N - p_f)`.
/// Families with known dispersion return it directly. A Gaussian fit that
/// interpolates the data gives 0, which callers must treat as degenerate.
pub fn estimate_dispersion(design: &ClusteredDesign, fit: &PqlFit, family: Family) -> Result<f64> {
    estimate_dispersion_with(design, fit, family, true)
}

pub fn estimate_dispersion_with(
    design: &ClusteredDesign,
    fit: &PqlFit,
    family: Family,
    df_correction: bool,
) -> Result<f64> {
    if let Some(phi) = family.known_dispersion() {
        return Ok(phi);
    }
    fit.theta.check_dims(design)?;
    let n = design.n_total();
    let denom = if df_correction { n as f64 - design.p_f() as f64 } else { n as f64 };
    if denom <= 0.0 {
        return Err(PqlError::InvalidDesign(format!("{n} observations cannot support {} fixed effects", design.p_f())));
    }
    let mut ss = 0.0;
    for (c, bi) in design.clusters().iter().zip(&fit.theta.b) {
        let eta = cluster_eta(c, &fit.theta.beta, bi);
        for j in 0..c.n() {
            let k = c.trials_at(j);
            let (mu, v) = family.mean_var(eta[j]);
            let r = c.y[j] - k * mu;
            ss += r * r / (k * v);
        }
    }
    Ok(ss / denom)
}
