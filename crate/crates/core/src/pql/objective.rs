use nalgebra::{DMatrix, DVector};

use super::design::{ClusterData, ClusteredDesign, ThetaState, WorkingParams};
use crate::error::{PqlError, Result};
use crate::family::Family;

/// Blocks of `B = -Hessian(Q)` under the `(beta, b_1..b_m)` partition.
///
/// `B2` is stored as its per-cluster column blocks and `B3 + B4` is block
/// diagonal, so the dense `(p_f + m p_r)`-square matrix is never needed.
#[derive(Debug, Clone, PartialEq)]
pub struct HessianBlocks {
    /// `sum_i X_i' W_i X_i`, p_f x p_f.
    pub b1: DMatrix<f64>,
    /// `X_i' W_i Z_i`, one p_f x p_r block per cluster.
    pub b2: Vec<DMatrix<f64>>,
    /// `Z_i' W_i Z_i`, one p_r x p_r block per cluster.
    pub b3: Vec<DMatrix<f64>>,
    /// `G^-1`, repeated down the diagonal.
    pub b4: DMatrix<f64>,
}

impl HessianBlocks {
    pub fn p_f(&self) -> usize {
        self.b1.nrows()
    }

    pub fn p_r(&self) -> usize {
        self.b4.nrows()
    }

    pub fn m(&self) -> usize {
        self.b3.len()
    }

    /// Dense `B`. Only meant for checking the blockwise algebra on small
    /// problems.
    pub fn assemble_dense(&self) -> DMatrix<f64> {
        let (pf, pr, m) = (self.p_f(), self.p_r(), self.m());
        let dim = pf + m * pr;
        let mut out = DMatrix::zeros(dim, dim);
        out.view_mut((0, 0), (pf, pf)).copy_from(&self.b1);
        for i in 0..m {
            let off = pf + i * pr;
            out.view_mut((0, off), (pf, pr)).copy_from(&self.b2[i]);
            out.view_mut((off, 0), (pr, pf)).copy_from(&self.b2[i].transpose());
            out.view_mut((off, off), (pr, pr)).copy_from(&(&self.b3[i] + &self.b4));
        }
        out
    }
}

fn check_inputs(design: &ClusteredDesign, theta: &ThetaState, work: &WorkingParams) -> Result<()> {
    theta.check_dims(design)?;
    work.check_dims(design)
}

/// Linear predictor of one cluster.
pub(crate) fn cluster_eta(c: &ClusterData, beta: &DVector<f64>, b: &DVector<f64>) -> DVector<f64> {
    let mut eta = &c.z * b;
    if !beta.is_empty() {
        eta.gemv(1.0, &c.x, beta, 1.0);
    }
    eta
}

fn finite_eta(eta: &DVector<f64>, cluster: usize) -> Result<()> {
    match eta.iter().position(|v| !v.is_finite()) {
        None => Ok(()),
        Some(j) => Err(PqlError::Domain(format!("non-finite linear predictor at cluster {cluster}, row {j}"))),
    }
}

/// `Q(theta)` without the base-measure terms `c(y, phi)`, which do not
/// depend on theta. Returns `-inf` once any linear predictor overflows so
/// line searches can reject the step.
pub(crate) fn kernel_objective(
    design: &ClusteredDesign,
    theta: &ThetaState,
    work: &WorkingParams,
    family: Family,
) -> f64 {
    let phi = work.phi_hat();
    let mut total = 0.0;
    for (c, bi) in design.clusters().iter().zip(&theta.b) {
        let eta = cluster_eta(c, &theta.beta, bi);
        let mut ll = 0.0;
        for j in 0..c.n() {
            let e = eta[j];
            ll += c.y[j] * e - c.trials_at(j) * family.cumulant_unchecked(e);
        }
        total += ll / phi - 0.5 * bi.dot(&(work.g_inv() * bi));
    }
    if total.is_finite() {
        total
    } else {
        f64::NEG_INFINITY
    }
}

/// The PQL objective: conditional log-likelihood at `(beta, b)` minus
/// `0.5 * sum_i b_i' G^-1 b_i`. The working dispersion enters the
/// log-density only.
pub fn pql_objective(
    design: &ClusteredDesign,
    theta: &ThetaState,
    work: &WorkingParams,
    family: Family,
) -> Result<f64> {
    check_inputs(design, theta, work)?;
    let phi = work.phi_hat();
    let mut total = 0.0;
    for (i, (c, bi)) in design.clusters().iter().zip(&theta.b).enumerate() {
        let eta = cluster_eta(c, &theta.beta, bi);
        finite_eta(&eta, i)?;
        for j in 0..c.n() {
            total += family
                .log_density_trials(c.y[j], eta[j], phi, c.trials_at(j))
                .map_err(|e| PqlError::Domain(format!("cluster {i}, row {j}: {e}")))?;
        }
        total -= 0.5 * bi.dot(&(work.g_inv() * bi));
    }
    Ok(total)
}

/// Score without the penalty: `[X'(y - mu); Z_1'(y_1 - mu_1); ...] / phi`.
pub fn unpenalized_score(
    design: &ClusteredDesign,
    theta: &ThetaState,
    work: &WorkingParams,
    family: Family,
) -> Result<DVector<f64>> {
    check_inputs(design, theta, work)?;
    let (pf, pr) = (design.p_f(), design.p_r());
    let mut out = DVector::zeros(design.n_params());
    let inv_phi = 1.0 / work.phi_hat();
    for (i, (c, bi)) in design.clusters().iter().zip(&theta.b).enumerate() {
        let eta = cluster_eta(c, &theta.beta, bi);
        finite_eta(&eta, i)?;
        let resid = DVector::from_fn(c.n(), |j, _| {
            (c.y[j] - c.trials_at(j) * family.mean_var(eta[j]).0) * inv_phi
        });
        if pf > 0 {
            let mut top = out.rows_mut(0, pf);
            top.gemv_tr(1.0, &c.x, &resid, 1.0);
        }
        out.rows_mut(pf + i * pr, pr).copy_from(&c.z.tr_mul(&resid));
    }
    Ok(out)
}

/// Gradient of the objective in stacked `(beta, b_1, ..., b_m)` order.
pub fn pql_gradient(
    design: &ClusteredDesign,
    theta: &ThetaState,
    work: &WorkingParams,
    family: Family,
) -> Result<DVector<f64>> {
    let mut g = unpenalized_score(design, theta, work, family)?;
    let (pf, pr) = (design.p_f(), design.p_r());
    for (i, bi) in theta.b.iter().enumerate() {
        let pen = work.g_inv() * bi;
        let mut block = g.rows_mut(pf + i * pr, pr);
        block -= pen;
    }
    Ok(g)
}

/// Blocks of the negative Hessian with `W = diag(trials * a''(eta)) / phi`.
pub fn pql_hessian_blocks(
    design: &ClusteredDesign,
    theta: &ThetaState,
    work: &WorkingParams,
    family: Family,
) -> Result<HessianBlocks> {
    check_inputs(design, theta, work)?;
    let (pf, pr, m) = (design.p_f(), design.p_r(), design.m());
    let inv_phi = 1.0 / work.phi_hat();
    let mut b1 = DMatrix::zeros(pf, pf);
    let mut b2 = Vec::with_capacity(m);
    let mut b3 = Vec::with_capacity(m);
    for (i, (c, bi)) in design.clusters().iter().zip(&theta.b).enumerate() {
        let eta = cluster_eta(c, &theta.beta, bi);
        finite_eta(&eta, i)?;
        let w = DVector::from_fn(c.n(), |j, _| c.trials_at(j) * family.mean_var(eta[j]).1 * inv_phi);
        let mut wz = c.z.clone();
        for (j, mut row) in wz.row_iter_mut().enumerate() {
            row *= w[j];
        }
        b3.push(c.z.tr_mul(&wz));
        if pf > 0 {
            let mut wx = c.x.clone();
            for (j, mut row) in wx.row_iter_mut().enumerate() {
                row *= w[j];
            }
            b1 += c.x.tr_mul(&wx);
            b2.push(c.x.tr_mul(&wz));
        } else {
            b2.push(DMatrix::zeros(0, pr));
        }
    }
    Ok(HessianBlocks {
        b1: crate::linalg::symmetrize(&b1),
        b2,
        b3: b3.iter().map(crate::linalg::symmetrize).collect(),
        b4: work.g_inv().clone(),
    })
}
