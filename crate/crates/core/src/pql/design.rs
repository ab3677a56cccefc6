use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{PqlError, Result};
use crate::family::Family;
use crate::linalg;

/// Responses and design matrices of one cluster.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterData {
    pub y: DVector<f64>,
    /// n_i x p_f fixed-effect design.
    pub x: DMatrix<f64>,
    /// n_i x p_r random-effect design.
    pub z: DMatrix<f64>,
    /// Binomial trial counts; `None` means one trial per observation.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trials: Option<DVector<f64>>,
}

impl ClusterData {
    pub fn new(y: DVector<f64>, x: DMatrix<f64>, z: DMatrix<f64>) -> Self {
        ClusterData { y, x, z, trials: None }
    }

    /// Cluster whose random-effect design equals its fixed-effect design.
    pub fn partnered(y: DVector<f64>, x: DMatrix<f64>) -> Self {
        let z = x.clone();
        ClusterData { y, x, z, trials: None }
    }

    pub fn with_trials(mut self, trials: DVector<f64>) -> Self {
        self.trials = Some(trials);
        self
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    #[inline]
    pub fn trials_at(&self, j: usize) -> f64 {
        self.trials.as_ref().map_or(1.0, |t| t[j])
    }
}

/// An ordered collection of independent clusters sharing fixed- and
/// random-effect dimensions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusteredDesign {
    clusters: Vec<ClusterData>,
    p_f: usize,
    p_r: usize,
    partnered: bool,
}

impl ClusteredDesign {
    /// Validates the clusters. Partnering (`X_i = Z_i` for every cluster) is
    /// detected from the data.
    pub fn new(clusters: Vec<ClusterData>) -> Result<Self> {
        let partnered = !clusters.is_empty() && clusters.iter().all(|c| c.x == c.z);
        Self::with_partnering(clusters, partnered)
    }

    /// Validates the clusters against a declared partnering flag.
    pub fn with_partnering(clusters: Vec<ClusterData>, partnered: bool) -> Result<Self> {
        let first = clusters
            .first()
            .ok_or_else(|| PqlError::InvalidDesign("design needs at least one cluster".into()))?;
        let (p_f, p_r) = (first.x.ncols(), first.z.ncols());
        if p_r == 0 {
            return Err(PqlError::InvalidDesign("random-effect dimension must be at least 1".into()));
        }
        for (i, c) in clusters.iter().enumerate() {
            let n = c.n();
            if n == 0 {
                return Err(PqlError::InvalidDesign(format!("cluster {i} has no observations")));
            }
            if c.x.nrows() != n || c.z.nrows() != n {
                return Err(PqlError::InvalidDesign(format!(
                    "cluster {i}: y has {n} rows but X has {} and Z has {}",
                    c.x.nrows(),
                    c.z.nrows()
                )));
            }
            if c.x.ncols() != p_f || c.z.ncols() != p_r {
                return Err(PqlError::InvalidDesign(format!(
                    "cluster {i}: expected {p_f} fixed and {p_r} random columns, found {} and {}",
                    c.x.ncols(),
                    c.z.ncols()
                )));
            }
            if let Some(t) = &c.trials {
                if t.len() != n {
                    return Err(PqlError::InvalidDesign(format!("cluster {i}: trials length {} != {n}", t.len())));
                }
            }
            let finite = c.y.iter().chain(c.x.iter()).chain(c.z.iter()).all(|v| v.is_finite());
            if !finite {
                return Err(PqlError::InvalidDesign(format!("cluster {i} contains non-finite values")));
            }
            if partnered && c.x != c.z {
                return Err(PqlError::InvalidDesign(format!(
                    "cluster {i}: declared partnered but Z differs from X"
                )));
            }
        }
        Ok(ClusteredDesign { clusters, p_f, p_r, partnered })
    }

    /// Checks every response against the family support.
    pub fn check_support(&self, family: Family) -> Result<()> {
        for (i, c) in self.clusters.iter().enumerate() {
            if family != Family::Binomial && c.trials.is_some() {
                return Err(PqlError::InvalidDesign(format!(
                    "cluster {i} carries trial counts but family is {family}"
                )));
            }
            for j in 0..c.n() {
                family
                    .check_support(c.y[j], c.trials_at(j))
                    .map_err(|e| PqlError::InvalidDesign(format!("cluster {i}, row {j}: {e}")))?;
            }
        }
        Ok(())
    }

    pub fn clusters(&self) -> &[ClusterData] {
        &self.clusters
    }

    pub fn cluster(&self, i: usize) -> Result<&ClusterData> {
        self.clusters
            .get(i)
            .ok_or_else(|| PqlError::InvalidArgument(format!("cluster index {i} out of range (m = {})", self.m())))
    }

    pub fn m(&self) -> usize {
        self.clusters.len()
    }

    pub fn p_f(&self) -> usize {
        self.p_f
    }

    pub fn p_r(&self) -> usize {
        self.p_r
    }

    pub fn partnered(&self) -> bool {
        self.partnered
    }

    /// Total number of observations N.
    pub fn n_total(&self) -> usize {
        self.clusters.iter().map(ClusterData::n).sum()
    }

    /// Average cluster size N / m.
    pub fn n_mean(&self) -> f64 {
        self.n_total() as f64 / self.m() as f64
    }

    pub fn n_min(&self) -> usize {
        self.clusters.iter().map(ClusterData::n).min().unwrap_or(0)
    }

    pub fn n_max(&self) -> usize {
        self.clusters.iter().map(ClusterData::n).max().unwrap_or(0)
    }

    /// Length of the stacked parameter vector, `p_f + m p_r`.
    pub fn n_params(&self) -> usize {
        self.p_f + self.m() * self.p_r
    }
}

/// Fixed effects and per-cluster random effects.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThetaState {
    pub beta: DVector<f64>,
    pub b: Vec<DVector<f64>>,
}

impl ThetaState {
    pub fn zeros(design: &ClusteredDesign) -> Self {
        ThetaState {
            beta: DVector::zeros(design.p_f()),
            b: vec![DVector::zeros(design.p_r()); design.m()],
        }
    }

    pub fn check_dims(&self, design: &ClusteredDesign) -> Result<()> {
        if self.beta.len() != design.p_f() {
            return Err(PqlError::Dimension(format!("beta has length {}, expected {}", self.beta.len(), design.p_f())));
        }
        if self.b.len() != design.m() {
            return Err(PqlError::Dimension(format!("{} random-effect vectors for {} clusters", self.b.len(), design.m())));
        }
        if let Some((i, bi)) = self.b.iter().enumerate().find(|(_, bi)| bi.len() != design.p_r()) {
            return Err(PqlError::Dimension(format!("b[{i}] has length {}, expected {}", bi.len(), design.p_r())));
        }
        Ok(())
    }

    /// Stacked `(beta, b_1, ..., b_m)`.
    pub fn to_stacked(&self) -> DVector<f64> {
        let total = self.beta.len() + self.b.iter().map(|b| b.len()).sum::<usize>();
        let mut out = DVector::zeros(total);
        out.rows_mut(0, self.beta.len()).copy_from(&self.beta);
        let mut off = self.beta.len();
        for bi in &self.b {
            out.rows_mut(off, bi.len()).copy_from(bi);
            off += bi.len();
        }
        out
    }

    pub fn from_stacked(v: &DVector<f64>, p_f: usize, p_r: usize) -> Result<Self> {
        if v.len() < p_f || p_r == 0 || (v.len() - p_f) % p_r != 0 {
            return Err(PqlError::Dimension(format!("stacked length {} incompatible with p_f={p_f}, p_r={p_r}", v.len())));
        }
        let m = (v.len() - p_f) / p_r;
        Ok(ThetaState {
            beta: v.rows(0, p_f).into_owned(),
            b: (0..m).map(|i| v.rows(p_f + i * p_r, p_r).into_owned()).collect(),
        })
    }

    /// `theta + step * delta` with `delta` in stacked order.
    pub fn add_scaled(&self, delta: &DVector<f64>, step: f64) -> ThetaState {
        let p_f = self.beta.len();
        let beta = &self.beta + delta.rows(0, p_f) * step;
        let mut off = p_f;
        let b = self
            .b
            .iter()
            .map(|bi| {
                let out = bi + delta.rows(off, bi.len()) * step;
                off += bi.len();
                out
            })
            .collect();
        ThetaState { beta, b }
    }

    /// Component-wise sum of the random effects.
    pub fn b_sum(&self) -> DVector<f64> {
        let p = self.b.first().map_or(0, |b| b.len());
        self.b.iter().fold(DVector::zeros(p), |acc, bi| acc + bi)
    }
}

/// The working random-effects covariance and dispersion plugged into the
/// objective.
#[derive(Debug, Clone, PartialEq)]
pub struct WorkingParams {
    g_hat: DMatrix<f64>,
    g_inv: DMatrix<f64>,
    phi_hat: f64,
}

impl WorkingParams {
    pub fn new(g_hat: DMatrix<f64>, phi_hat: f64) -> Result<Self> {
        if !g_hat.is_square() || g_hat.nrows() == 0 {
            return Err(PqlError::Dimension(format!("G must be square and non-empty, got {}x{}", g_hat.nrows(), g_hat.ncols())));
        }
        if !(phi_hat > 0.0 && phi_hat.is_finite()) {
            return Err(PqlError::InvalidArgument(format!("working dispersion must be positive, got {phi_hat}")));
        }
        let asym = (&g_hat - g_hat.transpose()).amax();
        let scale = g_hat.amax().max(1.0);
        if asym > 1e-12 * scale {
            return Err(PqlError::InvalidArgument(format!("G is not symmetric (max asymmetry {asym:.3e})")));
        }
        let g_hat = linalg::symmetrize(&g_hat);
        let g_inv = linalg::spd_inverse(&g_hat).ok_or_else(|| PqlError::SingularWorkingCovariance {
            min_eigenvalue: linalg::min_eigenvalue(&g_hat),
        })?;
        Ok(WorkingParams { g_hat, g_inv, phi_hat })
    }

    pub fn identity(p_r: usize) -> Self {
        WorkingParams::new(DMatrix::identity(p_r, p_r), 1.0).expect("identity is positive definite")
    }

    pub fn g_hat(&self) -> &DMatrix<f64> {
        &self.g_hat
    }

    pub fn g_inv(&self) -> &DMatrix<f64> {
        &self.g_inv
    }

    pub fn phi_hat(&self) -> f64 {
        self.phi_hat
    }

    pub(crate) fn check_dims(&self, design: &ClusteredDesign) -> Result<()> {
        if self.g_hat.nrows() != design.p_r() {
            return Err(PqlError::Dimension(format!(
                "G is {}x{} but the design has {} random effects",
                self.g_hat.nrows(),
                self.g_hat.ncols(),
                design.p_r()
            )));
        }
        Ok(())
    }
}
