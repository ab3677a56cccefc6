use nalgebra::{DMatrix, DVector};

use super::config::SolverConfig;
use super::outer::PqlFit;
use super::schur::{schur_complement, SchurComplement};
use crate::error::{PqlError, Result};
use crate::family::Family;
use crate::linalg;
use crate::pql::{self, ClusteredDesign, HessianBlocks, ThetaState, WorkingParams};

/// One Newton direction `delta = B^-1 grad(Q)` in stacked order.
#[derive(Debug, Clone)]
pub struct NewtonStep {
    pub delta: DVector<f64>,
    /// False when the Schur complement needed a ridge to factorise.
    pub direction_ok: bool,
    pub gradient: DVector<f64>,
}

/// Cholesky of `c`, adding `ridge * I` (growing tenfold) until it factors.
fn factor_with_ridge(c: &DMatrix<f64>, ridge_floor: f64) -> Result<(nalgebra::Cholesky<f64, nalgebra::Dyn>, bool)> {
    if let Some(ch) = linalg::cholesky(c) {
        return Ok((ch, true));
    }
    let p = c.nrows();
    let scale = c.diagonal().amax().max(1.0);
    let mut ridge = if ridge_floor > 0.0 { ridge_floor } else { 1e-12 } * scale;
    for _ in 0..30 {
        if let Some(ch) = linalg::cholesky(&(c + DMatrix::identity(p, p) * ridge)) {
            return Ok((ch, false));
        }
        ridge *= 10.0;
    }
    Err(PqlError::Numerical("Schur complement could not be regularised".into()))
}

/// Solves `B delta = grad` blockwise:
/// `delta_beta = C^-1 (S1 - sum_i B2_i cap_i S6_i)` and
/// `delta_b_i = cap_i (S6_i - B2_i' delta_beta)`.
pub fn newton_direction(
    blocks: &HessianBlocks,
    schur: &SchurComplement,
    gradient: &DVector<f64>,
    ridge_floor: f64,
) -> Result<(DVector<f64>, bool)> {
    let (pf, pr, m) = (blocks.p_f(), blocks.p_r(), blocks.m());
    if gradient.len() != pf + m * pr {
        return Err(PqlError::Dimension(format!("gradient length {} != {}", gradient.len(), pf + m * pr)));
    }
    let mut delta = DVector::zeros(gradient.len());
    let mut ok = true;
    let s6 = |i: usize| gradient.rows(pf + i * pr, pr);
    let delta_beta = if pf > 0 {
        let mut rhs: DVector<f64> = gradient.rows(0, pf).into_owned();
        for i in 0..m {
            rhs -= &blocks.b2[i] * (&schur.caps[i] * s6(i));
        }
        let (chol, clean) = factor_with_ridge(&schur.c, ridge_floor)?;
        ok = clean;
        let d = chol.solve(&rhs);
        delta.rows_mut(0, pf).copy_from(&d);
        d
    } else {
        DVector::zeros(0)
    };
    for i in 0..m {
        let mut r: DVector<f64> = s6(i).into_owned();
        if pf > 0 {
            r -= blocks.b2[i].tr_mul(&delta_beta);
        }
        delta.rows_mut(pf + i * pr, pr).copy_from(&(&schur.caps[i] * r));
    }
    Ok((delta, ok))
}

pub fn newton_step(
    design: &ClusteredDesign,
    theta: &ThetaState,
    work: &WorkingParams,
    family: Family,
    config: &SolverConfig,
) -> Result<NewtonStep> {
    let gradient = pql::pql_gradient(design, theta, work, family)?;
    let blocks = pql::pql_hessian_blocks(design, theta, work, family)?;
    let schur = schur_complement(&blocks)?;
    let (delta, direction_ok) = newton_direction(&blocks, &schur, &gradient, config.ridge_floor)?;
    Ok(NewtonStep { delta, direction_ok, gradient })
}

/// Slack for accepting a step whose objective change is lost in roundoff.
fn accept(candidate: f64, current: f64) -> bool {
    candidate.is_finite() && candidate >= current - 1e-12 * current.abs().max(1.0)
}

/// Starting fixed effects: a plain GLM fit (all `b_i = 0`) by damped
/// Newton, started from a least-squares fit to the linked responses.
fn glm_start(design: &ClusteredDesign, work: &WorkingParams, family: Family, config: &SolverConfig) -> DVector<f64> {
    let pf = design.p_f();
    if pf == 0 {
        return DVector::zeros(0);
    }
    let mut xtx = DMatrix::<f64>::zeros(pf, pf);
    let mut xtz = DVector::<f64>::zeros(pf);
    for c in design.clusters() {
        let pseudo = DVector::from_fn(c.n(), |j, _| {
            let (y, k) = (c.y[j], c.trials_at(j));
            match family {
                Family::Gaussian => y,
                Family::Poisson => (y + 0.5).ln(),
                Family::Bernoulli | Family::Binomial => {
                    let p = (y + 0.5) / (k + 1.0);
                    (p / (1.0 - p)).ln()
                }
            }
        });
        xtx += c.x.tr_mul(&c.x);
        xtz += c.x.tr_mul(&pseudo);
    }
    let mut beta = linalg::cholesky(&(xtx + DMatrix::identity(pf, pf) * 1e-8))
        .map(|ch| ch.solve(&xtz))
        .unwrap_or_else(|| DVector::zeros(pf));

    let zero_b = vec![DVector::zeros(design.p_r()); design.m()];
    let mut theta = ThetaState { beta: beta.clone(), b: zero_b.clone() };
    if !pql::kernel_objective(design, &theta, work, family).is_finite() {
        beta = DVector::zeros(pf);
        theta.beta = beta.clone();
    }
    for _ in 0..config.max_newton_iters {
        let (Ok(g), Ok(h)) = (
            pql::unpenalized_score(design, &theta, work, family),
            pql::pql_hessian_blocks(design, &theta, work, family),
        ) else {
            break;
        };
        let s1: DVector<f64> = g.rows(0, pf).into_owned();
        if linalg::sup_norm(&s1) <= config.grad_tol {
            break;
        }
        let Ok((ch, _)) = factor_with_ridge(&h.b1, config.ridge_floor) else { break };
        let d = ch.solve(&s1);
        let q0 = pql::kernel_objective(design, &theta, work, family);
        let mut moved = false;
        for h in 0..=config.step_halving_max {
            let t = 0.5f64.powi(h as i32);
            let cand = ThetaState { beta: &theta.beta + &d * t, b: zero_b.clone() };
            if accept(pql::kernel_objective(design, &cand, work, family), q0) {
                theta = cand;
                moved = true;
                break;
            }
        }
        if !moved {
            break;
        }
    }
    theta.beta
}

/// Damped Newton for fixed working parameters. Each iteration takes the
/// full blockwise Newton step and halves it until the objective does not
/// decrease (up to evaluation roundoff).
pub fn fit_inner(
    design: &ClusteredDesign,
    work: &WorkingParams,
    family: Family,
    config: &SolverConfig,
    init: Option<ThetaState>,
) -> Result<PqlFit> {
    config.validate()?;
    work.check_dims(design)?;
    let mut theta = match init {
        Some(t) => {
            t.check_dims(design)?;
            t
        }
        None => ThetaState {
            beta: glm_start(design, work, family, config),
            b: vec![DVector::zeros(design.p_r()); design.m()],
        },
    };
    let mut q = pql::kernel_objective(design, &theta, work, family);
    if !q.is_finite() {
        return Err(PqlError::Numerical("objective is not finite at the starting point".into()));
    }
    let mut trace = vec![q];
    let mut warnings = Vec::new();
    let mut iters = 0;
    let mut converged = false;
    let mut grad_norm;
    loop {
        let step = newton_step(design, &theta, work, family, config)?;
        grad_norm = linalg::sup_norm(&step.gradient);
        if grad_norm <= config.grad_tol {
            converged = true;
            break;
        }
        if iters >= config.max_newton_iters {
            warnings.push(format!("Newton iteration cap {} reached", config.max_newton_iters));
            break;
        }
        if !step.direction_ok {
            warnings.push(format!("iteration {iters}: Schur complement regularised with a ridge"));
        }
        iters += 1;
        let mut accepted = None;
        for h in 0..=config.step_halving_max {
            let t = 0.5f64.powi(h as i32);
            let cand = theta.add_scaled(&step.delta, t);
            let qc = pql::kernel_objective(design, &cand, work, family);
            if accept(qc, q) {
                accepted = Some((cand, qc));
                break;
            }
        }
        match accepted {
            Some((cand, qc)) => {
                theta = cand;
                q = qc;
                trace.push(q);
            }
            None => {
                warnings.push(format!("iteration {iters}: line search failed to find an ascent step"));
                break;
            }
        }
    }
    Ok(PqlFit {
        family,
        theta,
        g_hat: work.g_hat().clone(),
        phi_hat: work.phi_hat(),
        converged,
        newton_iters_total: iters,
        outer_iters: 1,
        final_grad_norm: grad_norm,
        objective: q,
        objective_trace: trace,
        warnings,
    })
}
