//! Independent reference computations shared by the integration tests.
#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use pqlmm::{ClusterData, ClusteredDesign, Family, PqlFit, ThetaState, WorkingParams};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use statrs::function::gamma::ln_gamma;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal(r: &mut ChaCha8Rng) -> f64 {
    r.sample(StandardNormal)
}

/// Random SPD matrix with eigenvalues roughly in [0.3, 2].
pub fn random_spd(r: &mut ChaCha8Rng, p: usize) -> DMatrix<f64> {
    let a = DMatrix::from_fn(p, p, |_, _| normal(r) * 0.4);
    let q = a.clone().qr().q();
    let d = DMatrix::from_diagonal(&DVector::from_fn(p, |_, _| r.random_range(0.3..2.0)));
    let g = &q * d * q.transpose();
    (&g + g.transpose()) * 0.5
}

pub struct Instance {
    pub design: ClusteredDesign,
    pub theta: ThetaState,
    pub work: WorkingParams,
    pub family: Family,
}

/// Random design with `m` clusters of 1..=`n_max` rows, `p` partnered
/// covariates (first column an intercept), responses drawn near `theta`.
pub fn random_instance(seed: u64, family: Family, m: usize, n_max: usize, p: usize, partnered: bool) -> Instance {
    let mut r = rng(seed);
    let beta = DVector::from_fn(p, |_, _| 0.3 * normal(&mut r));
    let g = random_spd(&mut r, p);
    let phi = if family == Family::Gaussian { r.random_range(0.5..2.0) } else { 1.0 };
    let mut clusters = Vec::new();
    let mut bs = Vec::new();
    for _ in 0..m {
        let n = r.random_range(1..=n_max);
        let x = DMatrix::from_fn(n, p, |_, k| if k == 0 { 1.0 } else { 0.7 * normal(&mut r) });
        let z = if partnered {
            x.clone()
        } else {
            DMatrix::from_fn(n, p, |_, k| if k == 0 { 1.0 } else { 0.7 * normal(&mut r) })
        };
        let b = DVector::from_fn(p, |_, _| 0.3 * normal(&mut r));
        let eta = &x * &beta + &z * &b;
        let trials = DVector::from_fn(n, |_, _| r.random_range(1..=6) as f64);
        let y = DVector::from_fn(n, |j, _| match family {
            Family::Gaussian => eta[j] + normal(&mut r),
            Family::Poisson => Poisson::new(eta[j].exp()).unwrap().sample(&mut r),
            Family::Bernoulli => f64::from(r.random::<f64>() < 1.0 / (1.0 + (-eta[j]).exp())),
            Family::Binomial => {
                let p = 1.0 / (1.0 + (-eta[j]).exp());
                (0..trials[j] as usize).filter(|_| r.random::<f64>() < p).count() as f64
            }
        });
        let c = ClusterData::new(y, x, z);
        clusters.push(if family == Family::Binomial { c.with_trials(trials) } else { c });
        bs.push(b);
    }
    let design = ClusteredDesign::new(clusters).unwrap();
    Instance { design, theta: ThetaState { beta, b: bs }, work: WorkingParams::new(g, phi).unwrap(), family }
}

/// Log-density written out per family, independent of the library.
pub fn scalar_log_density(family: Family, y: f64, eta: f64, phi: f64, k: f64) -> f64 {
    match family {
        Family::Gaussian => -(y - eta).powi(2) / (2.0 * phi) - 0.5 * (2.0 * std::f64::consts::PI * phi).ln(),
        Family::Poisson => y * eta - eta.exp() - ln_gamma(y + 1.0),
        Family::Bernoulli => y * eta - (1.0 + eta.exp()).ln(),
        Family::Binomial => {
            y * eta - k * (1.0 + eta.exp()).ln() + ln_gamma(k + 1.0) - ln_gamma(y + 1.0) - ln_gamma(k - y + 1.0)
        }
    }
}

fn row_eta(c: &ClusterData, j: usize, beta: &DVector<f64>, b: &DVector<f64>) -> f64 {
    let mut e = 0.0;
    for k in 0..beta.len() {
        e += c.x[(j, k)] * beta[k];
    }
    for k in 0..b.len() {
        e += c.z[(j, k)] * b[k];
    }
    e
}

/// Objective by explicit loops over rows.
pub fn scalar_objective(inst: &Instance, theta: &ThetaState) -> f64 {
    let gi = inst.work.g_inv();
    let mut total = 0.0;
    for (c, b) in inst.design.clusters().iter().zip(&theta.b) {
        for j in 0..c.n() {
            let k = c.trials.as_ref().map_or(1.0, |t| t[j]);
            total += scalar_log_density(inst.family, c.y[j], row_eta(c, j, &theta.beta, b), inst.work.phi_hat(), k);
        }
        for r in 0..b.len() {
            for s in 0..b.len() {
                total -= 0.5 * b[r] * gi[(r, s)] * b[s];
            }
        }
    }
    total
}

fn second_cumulant(family: Family, eta: f64) -> f64 {
    match family {
        Family::Gaussian => 1.0,
        Family::Poisson => eta.exp(),
        Family::Bernoulli | Family::Binomial => {
            let p = 1.0 / (1.0 + (-eta).exp());
            p * (1.0 - p)
        }
    }
}

/// Dense negative Hessian from per-row outer products.
pub fn dense_neg_hessian(inst: &Instance, theta: &ThetaState) -> DMatrix<f64> {
    let (pf, pr, m) = (inst.design.p_f(), inst.design.p_r(), inst.design.m());
    let dim = pf + m * pr;
    let mut h = DMatrix::zeros(dim, dim);
    for (i, (c, b)) in inst.design.clusters().iter().zip(&theta.b).enumerate() {
        for j in 0..c.n() {
            let k = c.trials.as_ref().map_or(1.0, |t| t[j]);
            let w = k * second_cumulant(inst.family, row_eta(c, j, &theta.beta, b)) / inst.work.phi_hat();
            let mut u = DVector::zeros(dim);
            for a in 0..pf {
                u[a] = c.x[(j, a)];
            }
            for a in 0..pr {
                u[pf + i * pr + a] = c.z[(j, a)];
            }
            h += &u * u.transpose() * w;
        }
        let mut blk = h.view_mut((pf + i * pr, pf + i * pr), (pr, pr));
        blk += inst.work.g_inv();
    }
    h
}

/// Central differences of `f` at `x`.
pub fn fd_gradient(f: impl Fn(&DVector<f64>) -> f64, x: &DVector<f64>) -> DVector<f64> {
    DVector::from_fn(x.len(), |k, _| {
        let h = 1e-5 * x[k].abs().max(1.0);
        let mut xp = x.clone();
        let mut xm = x.clone();
        xp[k] += h;
        xm[k] -= h;
        (f(&xp) - f(&xm)) / (2.0 * h)
    })
}

/// Central-difference Jacobian of a vector function (column k = d/dx_k).
pub fn fd_jacobian(f: impl Fn(&DVector<f64>) -> DVector<f64>, x: &DVector<f64>) -> DMatrix<f64> {
    let cols: Vec<DVector<f64>> = (0..x.len())
        .map(|k| {
            let h = 1e-5 * x[k].abs().max(1.0);
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[k] += h;
            xm[k] -= h;
            (f(&xp) - f(&xm)) / (2.0 * h)
        })
        .collect();
    DMatrix::from_columns(&cols)
}

/// `||a - b||_inf / max(||b||_inf, 1)`.
pub fn rel_err_vec(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    (a - b).amax() / b.amax().max(1.0)
}

pub fn rel_err_mat(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).amax() / b.amax().max(1.0)
}

/// Henderson's mixed-model equations for the Gaussian-identity model,
/// solved densely.
pub fn henderson(design: &ClusteredDesign, g: &DMatrix<f64>, phi: f64) -> DVector<f64> {
    let (pf, pr, m) = (design.p_f(), design.p_r(), design.m());
    let n = design.n_total();
    let dim = pf + m * pr;
    let mut w = DMatrix::zeros(n, dim);
    let mut y = DVector::zeros(n);
    let mut row = 0;
    for (i, c) in design.clusters().iter().enumerate() {
        for j in 0..c.n() {
            for a in 0..pf {
                w[(row, a)] = c.x[(j, a)];
            }
            for a in 0..pr {
                w[(row, pf + i * pr + a)] = c.z[(j, a)];
            }
            y[row] = c.y[j];
            row += 1;
        }
    }
    let gi = g.clone().try_inverse().unwrap();
    let mut lhs = w.transpose() * &w / phi;
    for i in 0..m {
        let off = pf + i * pr;
        for r in 0..pr {
            for s in 0..pr {
                lhs[(off + r, off + s)] += gi[(r, s)];
            }
        }
    }
    let rhs = w.transpose() * y / phi;
    lhs.lu().solve(&rhs).unwrap()
}

/// The sum-to-zero property of partnered fits.
pub fn assert_sum_to_zero(design: &ClusteredDesign, fit: &PqlFit, grad_tol: f64) {
    if design.partnered() && fit.converged {
        let s = fit.theta.b_sum().amax();
        assert!(s <= 10.0 * grad_tol, "sum of random effects {s:.3e} exceeds 10 * grad_tol");
    }
}
