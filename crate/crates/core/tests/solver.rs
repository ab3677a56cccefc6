mod common;

use common::*;
use nalgebra::{DMatrix, DVector};
use pqlmm::pql::{pql_gradient, pql_hessian_blocks};
use pqlmm::sim::{generate_section5, SimDesign, SimRegime};
use pqlmm::solver::{
    estimate_dispersion, fit_inner, fit_pql, newton_step, schur_complement, schur_complement_partnered_alt,
    GUpdateMode, SolverConfig,
};
use pqlmm::{ClusterData, ClusteredDesign, Family, ThetaState, WorkingParams};
use rand::Rng;

#[test]
fn schur_complement_matches_dense() {
    for seed in 0..10 {
        let inst = random_instance(seed, Family::Gaussian, 2, 6, 3, false);
        let blocks = pql_hessian_blocks(&inst.design, &inst.theta, &inst.work, Family::Gaussian).unwrap();
        let sc = schur_complement(&blocks).unwrap();
        let dense = dense_neg_hessian(&inst, &inst.theta);
        let a = dense.view((0, 0), (3, 3)).into_owned();
        let b = dense.view((0, 3), (3, 6)).into_owned();
        let d = dense.view((3, 3), (6, 6)).into_owned();
        let oracle = &a - &b * d.try_inverse().unwrap() * b.transpose();
        assert!(rel_err_mat(&sc.c, &oracle) < 1e-10);
    }
}

#[test]
fn partnered_schur_forms_agree() {
    for seed in 0..10 {
        let inst = random_instance(seed, Family::Poisson, 4, 8, 2, true);
        let blocks = pql_hessian_blocks(&inst.design, &inst.theta, &inst.work, Family::Poisson).unwrap();
        let sc = schur_complement(&blocks).unwrap();
        let alt = schur_complement_partnered_alt(&blocks, &sc.caps).unwrap();
        assert!(rel_err_mat(&sc.c, &alt) < 1e-10);
    }
}

#[test]
fn schur_complement_vanishes_without_penalty() {
    let inst = random_instance(4, Family::Poisson, 3, 8, 2, true);
    let work = WorkingParams::new(DMatrix::identity(2, 2) * 1e10, 1.0).unwrap();
    let blocks = pql_hessian_blocks(&inst.design, &inst.theta, &work, Family::Poisson).unwrap();
    let sc = schur_complement(&blocks).unwrap();
    assert!(sc.c.amax() < 1e-6 * blocks.b1.amax());
}

#[test]
fn singular_cluster_block_names_cluster() {
    // a cluster whose Z'WZ + G^-1 is singular cannot arise with SPD G, so
    // fake the blocks directly
    let inst = random_instance(2, Family::Gaussian, 3, 4, 1, true);
    let mut blocks = pql_hessian_blocks(&inst.design, &inst.theta, &inst.work, Family::Gaussian).unwrap();
    blocks.b3[1] = -blocks.b4.clone();
    let err = schur_complement(&blocks).unwrap_err().to_string();
    assert!(err.contains("cluster 1"), "{err}");
}

#[test]
fn newton_direction_matches_dense_solve() {
    let cfg = SolverConfig::default();
    for family in Family::ALL {
        for seed in 0..10 {
            let inst = random_instance(seed, family, 3, 6, 3, seed % 2 == 0);
            let step = newton_step(&inst.design, &inst.theta, &inst.work, family, &cfg).unwrap();
            let grad = pql_gradient(&inst.design, &inst.theta, &inst.work, family).unwrap();
            let dense = dense_neg_hessian(&inst, &inst.theta).lu().solve(&grad).unwrap();
            assert!((&step.delta - &dense).norm() <= 1e-9 * dense.norm());
            assert!(step.direction_ok);
        }
    }
}

#[test]
fn gaussian_fit_is_henderson_solution() {
    let cfg = SolverConfig { grad_tol: 1e-10, ..SolverConfig::default() };
    for seed in 0..10 {
        let inst = random_instance(seed, Family::Gaussian, 5, 8, 2, seed % 2 == 0);
        // one Newton step from zero
        let zero = ThetaState::zeros(&inst.design);
        let step = newton_step(&inst.design, &zero, &inst.work, Family::Gaussian, &cfg).unwrap();
        let mme = henderson(&inst.design, inst.work.g_hat(), inst.work.phi_hat());
        assert!(rel_err_vec(&step.delta, &mme) < 1e-9);
        let fit = fit_inner(&inst.design, &inst.work, Family::Gaussian, &cfg, None).unwrap();
        assert!(fit.converged);
        assert!(fit.newton_iters_total <= 1, "took {} steps", fit.newton_iters_total);
        assert!(rel_err_vec(&fit.theta.to_stacked(), &mme) < 1e-8);
        assert_sum_to_zero(&inst.design, &fit, cfg.grad_tol);
    }
}

#[test]
fn poisson_section5_fit_sums_to_zero() {
    let sim = SimDesign::five_covariate(Family::Poisson, 25, 25, SimRegime::Unconditional, 1, 3).unwrap();
    let (design, _) = generate_section5(&sim, 0).unwrap();
    let cfg = SolverConfig { grad_tol: 1e-10, ..SolverConfig::fixed_g() };
    let fit = fit_pql(&design, Family::Poisson, &cfg, &DMatrix::identity(5, 5), 1.0).unwrap();
    assert!(fit.converged);
    assert!(fit.final_grad_norm <= 1e-10);
    assert!(fit.theta.b_sum().amax() < 1e-8);
}

#[test]
fn objective_never_decreases() {
    for family in [Family::Poisson, Family::Bernoulli, Family::Binomial] {
        for seed in 0..8 {
            let inst = random_instance(seed, family, 6, 8, 2, true);
            let fit = fit_inner(&inst.design, &inst.work, family, &SolverConfig::default(), None).unwrap();
            assert!(fit.converged, "{family} seed {seed}: {:?}", fit.warnings);
            for w in fit.objective_trace.windows(2) {
                assert!(w[1] >= w[0] - 1e-12 * w[0].abs().max(1.0));
            }
            assert!(fit.final_grad_norm <= SolverConfig::default().grad_tol);
            assert_sum_to_zero(&inst.design, &fit, SolverConfig::default().grad_tol);
        }
    }
}

#[test]
fn separated_bernoulli_cluster_stays_finite() {
    let mut r = rng(5);
    let mut clusters = Vec::new();
    for i in 0..6 {
        let x = DMatrix::from_fn(10, 2, |_, k| if k == 0 { 1.0 } else { normal(&mut r) });
        let y = DVector::from_fn(10, |_, _| if i == 0 { 1.0 } else { f64::from(r.random::<f64>() < 0.5) });
        clusters.push(ClusterData::partnered(y, x));
    }
    let design = ClusteredDesign::new(clusters).unwrap();
    let fit = fit_inner(&design, &WorkingParams::identity(2), Family::Bernoulli, &SolverConfig::default(), None).unwrap();
    assert!(fit.converged);
    assert!(fit.theta.to_stacked().iter().all(|v| v.is_finite()));
    assert!(fit.theta.b[0][0] > 0.0);
}

#[test]
fn fixed_mode_equals_inner_fit() {
    let inst = random_instance(11, Family::Poisson, 8, 8, 2, true);
    let cfg = SolverConfig::fixed_g();
    let a = fit_pql(&inst.design, Family::Poisson, &cfg, inst.work.g_hat(), 1.0).unwrap();
    let b = fit_inner(&inst.design, &inst.work, Family::Poisson, &cfg, None).unwrap();
    assert_eq!(a.theta, b.theta);
    assert_eq!(&a.g_hat, inst.work.g_hat());
}

#[test]
fn sample_cov_mode_reaches_fixed_point() {
    let sim = SimDesign::five_covariate(Family::Poisson, 50, 25, SimRegime::Unconditional, 1, 8).unwrap();
    let (design, _) = generate_section5(&sim, 0).unwrap();
    let cfg = SolverConfig::default();
    let fit = fit_pql(&design, Family::Poisson, &cfg, &DMatrix::identity(5, 5), 1.0).unwrap();
    assert!(fit.converged, "{:?}", fit.warnings);
    assert!(fit.outer_iters > 1);
    let g = pqlmm::solver::sample_covariance(&fit.theta);
    assert!((&g - &fit.g_hat).amax() < 1e-12);
    assert_sum_to_zero(&design, &fit, cfg.grad_tol);
}

#[test]
fn dispersion_rescaling_invariance() {
    // (phi, G) and (1, G / phi) define proportional objectives
    for seed in 0..5 {
        let inst = random_instance(seed, Family::Gaussian, 6, 6, 2, true);
        let cfg = SolverConfig { grad_tol: 1e-11, ..SolverConfig::default() };
        let phi = 2.5;
        let a = fit_inner(&inst.design, &WorkingParams::new(inst.work.g_hat().clone(), phi).unwrap(), Family::Gaussian, &cfg, None).unwrap();
        let b = fit_inner(&inst.design, &WorkingParams::new(inst.work.g_hat() * (1.0 / phi), 1.0).unwrap(), Family::Gaussian, &cfg, None).unwrap();
        assert!(rel_err_vec(&a.theta.to_stacked(), &b.theta.to_stacked()) < 1e-8);
    }
}

#[test]
fn dispersion_estimates() {
    let inst = random_instance(1, Family::Poisson, 4, 6, 2, true);
    let fit = fit_inner(&inst.design, &inst.work, Family::Poisson, &SolverConfig::default(), None).unwrap();
    assert_eq!(estimate_dispersion(&inst.design, &fit, Family::Poisson).unwrap(), 1.0);

    // exact interpolation gives zero
    let x = DMatrix::from_row_slice(3, 1, &[1.0, 1.0, 1.0]);
    let c = ClusterData::partnered(DVector::from_vec(vec![2.0, 2.0, 2.0]), x);
    let design = ClusteredDesign::new(vec![c.clone(), c]).unwrap();
    let fit = fit_inner(&design, &WorkingParams::identity(1), Family::Gaussian, &SolverConfig::default(), None).unwrap();
    assert!(estimate_dispersion(&design, &fit, Family::Gaussian).unwrap() < 1e-12);

    // phi = 2, N = 10,000
    let mut sim = SimDesign::five_covariate(Family::Gaussian, 100, 100, SimRegime::Unconditional, 1, 4).unwrap();
    sim.phi_true = 2.0;
    let (design, _) = generate_section5(&sim, 0).unwrap();
    let fit = fit_pql(&design, Family::Gaussian, &SolverConfig::default(), &DMatrix::identity(5, 5), 1.0).unwrap();
    let phi = estimate_dispersion(&design, &fit, Family::Gaussian).unwrap();
    assert!((1.8..=2.2).contains(&phi), "{phi}");
}

#[test]
fn config_rejects_bad_values() {
    let bad = SolverConfig { grad_tol: 0.0, ..SolverConfig::default() };
    let inst = random_instance(1, Family::Gaussian, 2, 3, 1, true);
    assert!(fit_pql(&inst.design, Family::Gaussian, &bad, &DMatrix::identity(1, 1), 1.0).is_err());
    let cap = SolverConfig { max_newton_iters: 1, g_update_mode: GUpdateMode::Fixed, ..SolverConfig::default() };
    let poisson = random_instance(1, Family::Poisson, 6, 8, 2, true);
    let fit = fit_pql(&poisson.design, Family::Poisson, &cap, &DMatrix::identity(2, 2), 1.0).unwrap();
    assert!(!fit.converged);
    assert!(!fit.warnings.is_empty());
}
