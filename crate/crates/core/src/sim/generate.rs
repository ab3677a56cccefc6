use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{PqlError, Result};
use crate::family::{logistic, Family};
use crate::linalg;
use crate::pql::{ClusterData, ClusteredDesign, ThetaState};
use crate::rng::{item_stream, shared_stream, std_normal, Purpose, StreamRng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimRegime {
    /// One random-effect vector shared by every replicate.
    Conditional,
    /// Random effects redrawn per replicate.
    Unconditional,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SimModel {
    /// Five partnered covariates: intercept, a correlated normal pair, a
    /// normal and a Bernoulli(0.5) indicator.
    FiveCovariate,
    /// `eta_ij = b_i`, no fixed effects.
    RandomIntercept { sigma_b2: f64 },
}

/// A balanced simulation design.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimDesign {
    pub family: Family,
    pub model: SimModel,
    pub m: usize,
    pub n: usize,
    pub beta_true: DVector<f64>,
    pub g_true: DMatrix<f64>,
    /// Residual variance for Gaussian responses.
    #[serde(default = "one")]
    pub phi_true: f64,
    pub regime: SimRegime,
    pub replicates: usize,
    pub seed: u64,
}

fn one() -> f64 {
    1.0
}

impl SimDesign {
    /// Five-covariate design with the default truth for `family`.
    pub fn five_covariate(family: Family, m: usize, n: usize, regime: SimRegime, replicates: usize, seed: u64) -> Result<Self> {
        let beta_true = match family {
            Family::Poisson => DVector::from_vec(vec![2.0, 0.1, -0.1, 0.1, 0.1]),
            Family::Bernoulli | Family::Gaussian => DVector::from_vec(vec![-0.1, 0.1, -0.1, 0.1, 0.1]),
            Family::Binomial => {
                return Err(PqlError::Unsupported("binomial responses are not simulated; use bernoulli".into()))
            }
        };
        Ok(SimDesign {
            family,
            model: SimModel::FiveCovariate,
            m,
            n,
            beta_true,
            g_true: DMatrix::identity(5, 5),
            phi_true: 1.0,
            regime,
            replicates,
            seed,
        })
    }

    pub fn random_intercept(family: Family, m: usize, n: usize, sigma_b2: f64, replicates: usize, seed: u64) -> Self {
        SimDesign {
            family,
            model: SimModel::RandomIntercept { sigma_b2 },
            m,
            n,
            beta_true: DVector::zeros(0),
            g_true: DMatrix::from_element(1, 1, sigma_b2),
            phi_true: 1.0,
            regime: SimRegime::Unconditional,
            replicates,
            seed,
        }
    }

    pub fn p_f(&self) -> usize {
        match self.model {
            SimModel::FiveCovariate => 5,
            SimModel::RandomIntercept { .. } => 0,
        }
    }

    pub fn p_r(&self) -> usize {
        match self.model {
            SimModel::FiveCovariate => 5,
            SimModel::RandomIntercept { .. } => 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(PqlError::InvalidArgument(msg));
        if self.m == 0 || self.n == 0 {
            return bad(format!("m and n must be positive, got m={}, n={}", self.m, self.n));
        }
        if self.replicates == 0 {
            return bad("replicates must be at least 1".into());
        }
        if self.family == Family::Binomial {
            return Err(PqlError::Unsupported("binomial responses are not simulated; use bernoulli".into()));
        }
        if self.beta_true.len() != self.p_f() {
            return bad(format!("beta_true has length {}, expected {}", self.beta_true.len(), self.p_f()));
        }
        if self.g_true.shape() != (self.p_r(), self.p_r()) {
            return bad(format!("g_true must be {0}x{0}", self.p_r()));
        }
        if let SimModel::RandomIntercept { sigma_b2 } = self.model {
            if !(sigma_b2 >= 0.0) || (self.g_true[(0, 0)] - sigma_b2).abs() > 1e-12 {
                return bad("random-intercept variance must be nonnegative and match g_true".into());
            }
        }
        if (&self.g_true - self.g_true.transpose()).amax() > 1e-12 || linalg::psd_sqrt(&self.g_true).is_none() {
            return bad("g_true must be symmetric positive semidefinite".into());
        }
        if !(self.phi_true > 0.0) {
            return bad("phi_true must be positive".into());
        }
        Ok(())
    }
}

/// One simulated data set with its generating random effects.
#[derive(Debug, Clone)]
pub struct SimReplicate {
    pub design: ClusteredDesign,
    pub truth: ThetaState,
}

/// True random effects for replicate `rep`: shared across replicates in
/// the conditional regime.
pub fn true_random_effects(design: &SimDesign, rep: u64) -> Result<Vec<DVector<f64>>> {
    let root = linalg::psd_sqrt(&design.g_true)
        .ok_or_else(|| PqlError::InvalidArgument("g_true is not positive semidefinite".into()))?;
    let mut rng = match design.regime {
        SimRegime::Conditional => shared_stream(design.seed, Purpose::RandomEffects),
        SimRegime::Unconditional => item_stream(design.seed, rep, Purpose::RandomEffects),
    };
    Ok((0..design.m).map(|_| crate::rng::mvn_draw(&mut rng, &root)).collect())
}

fn five_covariates(rng: &mut StreamRng, n: usize) -> DMatrix<f64> {
    let rho: f64 = 0.5;
    let s = (1.0 - rho * rho).sqrt();
    let mut x = DMatrix::zeros(n, 5);
    for j in 0..n {
        let z1 = std_normal(rng);
        let z2 = std_normal(rng);
        x[(j, 0)] = 1.0;
        x[(j, 1)] = z1;
        x[(j, 2)] = rho * z1 + s * z2;
        x[(j, 3)] = std_normal(rng);
        x[(j, 4)] = if rng.random::<f64>() < 0.5 { 1.0 } else { 0.0 };
    }
    x
}

fn draw_response(family: Family, eta: f64, phi: f64, rng: &mut StreamRng) -> Result<f64> {
    Ok(match family {
        Family::Gaussian => eta + phi.sqrt() * std_normal(rng),
        Family::Poisson => {
            let mu = eta.exp();
            if mu == 0.0 {
                0.0
            } else {
                Poisson::new(mu).map_err(|e| PqlError::Numerical(format!("Poisson mean {mu}: {e}")))?.sample(rng)
            }
        }
        Family::Bernoulli => {
            if rng.random::<f64>() < logistic(eta) {
                1.0
            } else {
                0.0
            }
        }
        Family::Binomial => return Err(PqlError::Unsupported("binomial responses are not simulated".into())),
    })
}

/// Simulates replicate `rep`. Covariates and responses are drawn from
/// per-replicate streams, so replicates are independent of run order.
pub fn generate(design: &SimDesign, rep: u64) -> Result<SimReplicate> {
    design.validate()?;
    let b = true_random_effects(design, rep)?;
    let mut xrng = item_stream(design.seed, rep, Purpose::Covariates);
    let mut yrng = item_stream(design.seed, rep, Purpose::Responses);
    let mut clusters = Vec::with_capacity(design.m);
    for bi in &b {
        let (x, z) = match design.model {
            SimModel::FiveCovariate => {
                let x = five_covariates(&mut xrng, design.n);
                (x.clone(), x)
            }
            SimModel::RandomIntercept { .. } => (DMatrix::zeros(design.n, 0), DMatrix::from_element(design.n, 1, 1.0)),
        };
        let eta = &x * &design.beta_true + &z * bi;
        let y = eta
            .iter()
            .map(|&e| draw_response(design.family, e, design.phi_true, &mut yrng))
            .collect::<Result<Vec<_>>>()?;
        clusters.push(ClusterData::new(DVector::from_vec(y), x, z));
    }
    let design_out = match design.model {
        SimModel::FiveCovariate => ClusteredDesign::with_partnering(clusters, true)?,
        SimModel::RandomIntercept { .. } => ClusteredDesign::new(clusters)?,
    };
    Ok(SimReplicate { design: design_out, truth: ThetaState { beta: design.beta_true.clone(), b } })
}

/// Five-covariate data set and its truth.
pub fn generate_section5(design: &SimDesign, rep: u64) -> Result<(ClusteredDesign, ThetaState)> {
    if design.model != SimModel::FiveCovariate {
        return Err(PqlError::InvalidArgument("design is not the five-covariate model".into()));
    }
    let r = generate(design, rep)?;
    Ok((r.design, r.truth))
}

/// Poisson random-intercept data set `log mu_ij = b_i`.
pub fn generate_poisson_intercept(m: usize, n: usize, sigma_b2: f64, seed: u64) -> Result<(ClusteredDesign, Vec<f64>)> {
    if !(sigma_b2 >= 0.0) {
        return Err(PqlError::InvalidArgument(format!("sigma_b2 must be nonnegative, got {sigma_b2}")));
    }
    let r = generate(&SimDesign::random_intercept(Family::Poisson, m, n, sigma_b2, 1, seed), 0)?;
    Ok((r.design, r.truth.b.iter().map(|b| b[0]).collect()))
}
