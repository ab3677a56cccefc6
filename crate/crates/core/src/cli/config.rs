use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{PqlError, Result};
use crate::family::Family;
use crate::inference::{InferenceSettings, Regime};
use crate::sim::{ExperimentOptions, GMode, SimDesign, SimModel, SimRegime, SimTarget};
use crate::solver::SolverConfig;

/// Which CSV columns play which role.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ColumnMap {
    pub cluster: String,
    pub response: String,
    /// Fixed-effect columns; empty means every `x<k>` column in header order.
    pub fixed: Vec<String>,
    /// Random-effect columns; absent means the fixed columns (partnered).
    pub random: Option<Vec<String>>,
    /// Binomial trial counts.
    pub trials: Option<String>,
}

impl Default for ColumnMap {
    fn default() -> Self {
        ColumnMap { cluster: "cluster_id".into(), response: "y".into(), fixed: Vec::new(), random: None, trials: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InferenceOptions {
    /// `conditional`, `unconditional`, `many-clusters`, `balanced:<gamma>`,
    /// `large-clusters` or `auto`.
    pub regime: String,
    pub level: f64,
    pub seed: Option<u64>,
    #[serde(flatten)]
    pub settings: InferenceSettings,
}

impl Default for InferenceOptions {
    fn default() -> Self {
        InferenceOptions { regime: "auto".into(), level: 0.95, seed: None, settings: InferenceSettings::default() }
    }
}

impl InferenceOptions {
    pub fn regime(&self) -> Result<Regime> {
        self.regime.parse()
    }
}

/// Configuration for `fit` and `infer`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub family: Family,
    /// Declared partnering; checked against the data.
    pub partnered: bool,
    pub columns: ColumnMap,
    pub solver: SolverConfig,
    pub inference: InferenceOptions,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            family: Family::Gaussian,
            partnered: true,
            columns: ColumnMap::default(),
            solver: SolverConfig::default(),
            inference: InferenceOptions::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.solver.validate()?;
        self.inference.settings.validate()?;
        self.inference.regime()?;
        check_level(self.inference.level)?;
        if let Some(r) = &self.columns.random {
            if r.is_empty() {
                return Err(PqlError::InvalidArgument("columns.random must name at least one column".into()));
            }
            if self.partnered && !self.columns.fixed.is_empty() && *r != self.columns.fixed {
                return Err(PqlError::InvalidArgument(
                    "partnered = true but columns.random differs from columns.fixed".into(),
                ));
            }
        }
        Ok(())
    }
}

pub(crate) fn check_level(level: f64) -> Result<()> {
    if level > 0.0 && level < 1.0 {
        Ok(())
    } else {
        Err(PqlError::InvalidArgument(format!("level must lie strictly between 0 and 1, got {level}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Study {
    Coverage,
    GapNormality,
    Frobenius,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Grid {
    pub m: Vec<usize>,
    pub n: Vec<usize>,
}

impl Default for Grid {
    fn default() -> Self {
        Grid { m: vec![25, 100], n: vec![25, 100] }
    }
}

pub const FULL_GRID: [usize; 5] = [25, 50, 100, 200, 400];

/// Configuration for `simulate`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateConfig {
    pub family: Family,
    pub model: SimModel,
    pub study: Study,
    pub grid: Grid,
    /// Use the 5 x 5 grid over {25, 50, 100, 200, 400} instead of `grid`.
    pub full_grid: bool,
    pub regime: SimRegime,
    pub replicates: usize,
    pub seed: Option<u64>,
    pub targets: Vec<SimTarget>,
    pub level: f64,
    pub gap_regime: String,
    pub use_true_params: bool,
    pub g_modes: Vec<GMode>,
    pub beta_true: Option<Vec<f64>>,
    pub g_true: Option<Vec<Vec<f64>>>,
    pub phi_true: Option<f64>,
    pub solver: SolverConfig,
    pub inference: InferenceSettings,
}

impl Default for SimulateConfig {
    fn default() -> Self {
        SimulateConfig {
            family: Family::Poisson,
            model: SimModel::FiveCovariate,
            study: Study::Coverage,
            grid: Grid::default(),
            full_grid: false,
            regime: SimRegime::Unconditional,
            replicates: 200,
            seed: None,
            targets: vec![SimTarget::Beta, SimTarget::B1],
            level: 0.95,
            gap_regime: "auto".into(),
            use_true_params: true,
            g_modes: GMode::standard(),
            beta_true: None,
            g_true: None,
            phi_true: None,
            solver: SolverConfig::default(),
            inference: InferenceSettings::default(),
        }
    }
}

impl SimulateConfig {
    pub fn cells(&self) -> Vec<(usize, usize)> {
        let (ms, ns) = if self.full_grid {
            (FULL_GRID.to_vec(), FULL_GRID.to_vec())
        } else {
            (self.grid.m.clone(), self.grid.n.clone())
        };
        ms.iter().flat_map(|&m| ns.iter().map(move |&n| (m, n))).collect()
    }

    /// One validated design per grid cell.
    pub fn designs(&self, seed: u64) -> Result<Vec<SimDesign>> {
        check_level(self.level)?;
        self.solver.validate()?;
        self.inference.validate()?;
        self.gap_regime.parse::<Regime>()?;
        let cells = self.cells();
        if cells.is_empty() {
            return Err(PqlError::InvalidArgument("simulation grid is empty".into()));
        }
        cells
            .into_iter()
            .map(|(m, n)| {
                let mut d = match self.model {
                    SimModel::FiveCovariate => {
                        SimDesign::five_covariate(self.family, m, n, self.regime, self.replicates, seed)?
                    }
                    SimModel::RandomIntercept { sigma_b2 } => {
                        let mut d = SimDesign::random_intercept(self.family, m, n, sigma_b2, self.replicates, seed);
                        d.regime = self.regime;
                        d
                    }
                };
                if let Some(b) = &self.beta_true {
                    d.beta_true = nalgebra::DVector::from_vec(b.clone());
                }
                if let Some(g) = &self.g_true {
                    d.g_true = matrix_from_rows(g)?;
                }
                if let Some(phi) = self.phi_true {
                    d.phi_true = phi;
                }
                d.validate()?;
                Ok(d)
            })
            .collect()
    }

    pub fn options(&self, jobs: usize) -> Result<ExperimentOptions> {
        Ok(ExperimentOptions {
            targets: self.targets.clone(),
            level: self.level,
            gap_regime: self.gap_regime.parse()?,
            use_true_params: self.use_true_params,
            init_g: None,
            inference: self.inference.clone(),
            jobs,
        })
    }
}

pub fn matrix_from_rows(rows: &[Vec<f64>]) -> Result<nalgebra::DMatrix<f64>> {
    let r = rows.len();
    let c = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|row| row.len() != c) {
        return Err(PqlError::Dimension("matrix rows have unequal lengths".into()));
    }
    Ok(nalgebra::DMatrix::from_fn(r, c, |i, j| rows[i][j]))
}

pub fn matrix_to_rows(m: &nalgebra::DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

/// Reads a JSON file into `T`, rejecting unknown keys.
pub fn load_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| PqlError::Io(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| PqlError::Parse(format!("{}: {e}", path.display())))
}
