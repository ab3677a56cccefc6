use serde::{Deserialize, Serialize};

use crate::error::{PqlError, Result};

/// How the working covariance evolves between inner fits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GUpdateMode {
    /// `G <- m^-1 sum_i b_i b_i'` until the Frobenius change is small.
    SampleCov,
    /// Keep the initial working matrix.
    Fixed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverConfig {
    pub max_newton_iters: usize,
    /// Sup-norm of the gradient at which an inner fit counts as converged.
    pub grad_tol: f64,
    pub max_outer_iters: usize,
    /// Frobenius norm of the change in G that stops the outer loop.
    pub g_update_tol: f64,
    pub g_update_mode: GUpdateMode,
    pub step_halving_max: usize,
    /// Ridge added to the Schur complement when it is not positive definite.
    pub ridge_floor: f64,
    /// Smallest eigenvalue allowed in an updated G.
    pub g_eigen_floor: f64,
    /// Divide the Pearson dispersion estimate by `N - p_f` instead of `N`.
    pub dispersion_df_correction: bool,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            max_newton_iters: 200,
            grad_tol: 1e-6,
            max_outer_iters: 100,
            g_update_tol: 1e-6,
            g_update_mode: GUpdateMode::SampleCov,
            step_halving_max: 40,
            ridge_floor: 1e-8,
            g_eigen_floor: 1e-8,
            dispersion_df_correction: true,
        }
    }
}

impl SolverConfig {
    pub fn fixed_g() -> Self {
        SolverConfig { g_update_mode: GUpdateMode::Fixed, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(PqlError::InvalidArgument(format!("{name} must be positive, got {v}")))
            }
        };
        positive("grad_tol", self.grad_tol)?;
        positive("g_update_tol", self.g_update_tol)?;
        positive("g_eigen_floor", self.g_eigen_floor)?;
        if !(self.ridge_floor >= 0.0 && self.ridge_floor.is_finite()) {
            return Err(PqlError::InvalidArgument(format!("ridge_floor must be non-negative, got {}", self.ridge_floor)));
        }
        if self.max_newton_iters == 0 || self.max_outer_iters == 0 {
            return Err(PqlError::InvalidArgument("iteration caps must be at least 1".into()));
        }
        Ok(())
    }
}
