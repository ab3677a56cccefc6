use std::collections::BTreeMap;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use super::config::{matrix_from_rows, matrix_to_rows, ColumnMap};
use super::dataset::Dataset;
use crate::error::{PqlError, Result};
use crate::family::Family;
use crate::pql::ThetaState;
use crate::solver::{PqlFit, SolverConfig};

pub const ARTIFACT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub converged: bool,
    pub newton_iters_total: usize,
    pub outer_iters: usize,
    pub final_grad_norm: f64,
    pub objective: f64,
    pub max_abs_b_sum: f64,
    pub warnings: Vec<String>,
}

/// Everything `infer` needs to rebuild a fit against the same data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitArtifact {
    pub version: u32,
    pub family: Family,
    pub data_hash: String,
    pub partnered: bool,
    pub columns: ColumnMap,
    pub fixed_names: Vec<String>,
    pub random_names: Vec<String>,
    /// First-appearance order of the cluster ids in the data.
    pub cluster_order: Vec<String>,
    pub beta: Vec<f64>,
    pub random_effects: BTreeMap<String, Vec<f64>>,
    pub g_hat: Vec<Vec<f64>>,
    /// Working dispersion used in the objective.
    pub phi_hat: f64,
    /// Pearson estimate after convergence.
    pub phi_tilde: f64,
    pub solver: SolverConfig,
    pub diagnostics: Diagnostics,
}

impl FitArtifact {
    pub fn from_fit(
        data: &Dataset,
        fit: &PqlFit,
        phi_tilde: f64,
        columns: &ColumnMap,
        partnered: bool,
        solver: &SolverConfig,
    ) -> Self {
        let b_sum = fit.theta.b_sum();
        FitArtifact {
            version: ARTIFACT_VERSION,
            family: fit.family,
            data_hash: data.data_hash.clone(),
            partnered,
            columns: columns.clone(),
            fixed_names: data.fixed_names.clone(),
            random_names: data.random_names.clone(),
            cluster_order: data.cluster_ids.clone(),
            beta: fit.theta.beta.iter().copied().collect(),
            random_effects: data
                .cluster_ids
                .iter()
                .zip(&fit.theta.b)
                .map(|(id, b)| (id.clone(), b.iter().copied().collect()))
                .collect(),
            g_hat: matrix_to_rows(&fit.g_hat),
            phi_hat: fit.phi_hat,
            phi_tilde,
            solver: solver.clone(),
            diagnostics: Diagnostics {
                converged: fit.converged,
                newton_iters_total: fit.newton_iters_total,
                outer_iters: fit.outer_iters,
                final_grad_norm: fit.final_grad_norm,
                objective: fit.objective,
                max_abs_b_sum: b_sum.amax(),
                warnings: fit.warnings.clone(),
            },
        }
    }

    /// Rebuilds the fit; fails if `data` is not the data set it came from.
    pub fn to_fit(&self, data: &Dataset) -> Result<PqlFit> {
        if self.version != ARTIFACT_VERSION {
            return Err(PqlError::InvalidArgument(format!("unsupported artifact version {}", self.version)));
        }
        if self.data_hash != data.data_hash {
            return Err(PqlError::InvalidArgument(
                "fit artifact does not match the data (hash mismatch); refit first".into(),
            ));
        }
        if self.cluster_order != data.cluster_ids {
            return Err(PqlError::InvalidArgument("cluster order in artifact differs from the data".into()));
        }
        let b = self
            .cluster_order
            .iter()
            .map(|id| {
                self.random_effects
                    .get(id)
                    .map(|v| DVector::from_vec(v.clone()))
                    .ok_or_else(|| PqlError::Parse(format!("artifact has no random effect for cluster '{id}'")))
            })
            .collect::<Result<Vec<_>>>()?;
        let theta = ThetaState { beta: DVector::from_vec(self.beta.clone()), b };
        theta.check_dims(&data.design)?;
        Ok(PqlFit {
            family: self.family,
            theta,
            g_hat: matrix_from_rows(&self.g_hat)?,
            phi_hat: self.phi_hat,
            converged: self.diagnostics.converged,
            newton_iters_total: self.diagnostics.newton_iters_total,
            outer_iters: self.diagnostics.outer_iters,
            final_grad_norm: self.diagnostics.final_grad_norm,
            objective: self.diagnostics.objective,
            objective_trace: Vec::new(),
            warnings: self.diagnostics.warnings.clone(),
        })
    }
}
