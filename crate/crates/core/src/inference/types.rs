use std::fmt;
use std::str::FromStr;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{PqlError, Result};

/// Which asymptotic regime an interval is built under. The three
/// `Uncond*` prediction-gap cases correspond to `m / n_i` diverging,
/// settling at `gamma`, or vanishing.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "tag", rename_all = "snake_case")]
pub enum Regime {
    Conditional,
    /// Unconditional fixed-effect inference (no cluster-size case split).
    Unconditional,
    UncondManyClusters,
    UncondBalanced { gamma: f64 },
    UncondLargeClusters,
    /// Pick one of the three gap cases from the observed `m / n_i`.
    Auto,
}

impl Regime {
    /// Resolves `Auto` with the thresholds in `settings`; other tags are
    /// returned unchanged (after validating `gamma`).
    pub fn resolve(self, m: usize, n_i: usize, settings: &InferenceSettings) -> Result<Regime> {
        match self {
            Regime::Auto => {
                let ratio = m as f64 / n_i as f64;
                Ok(if ratio >= settings.many_clusters_ratio {
                    Regime::UncondManyClusters
                } else if ratio <= settings.large_clusters_ratio {
                    Regime::UncondLargeClusters
                } else {
                    Regime::UncondBalanced { gamma: ratio }
                })
            }
            Regime::UncondBalanced { gamma } if !(gamma > 0.0 && gamma.is_finite()) => {
                Err(PqlError::InvalidArgument(format!("balanced regime needs gamma > 0, got {gamma}")))
            }
            other => Ok(other),
        }
    }
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Regime::Conditional => f.write_str("conditional"),
            Regime::Unconditional => f.write_str("unconditional"),
            Regime::UncondManyClusters => f.write_str("many-clusters"),
            Regime::UncondBalanced { gamma } => write!(f, "balanced:{gamma}"),
            Regime::UncondLargeClusters => f.write_str("large-clusters"),
            Regime::Auto => f.write_str("auto"),
        }
    }
}

impl FromStr for Regime {
    type Err = PqlError;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim().to_ascii_lowercase().replace('_', "-");
        let (head, arg) = match s.split_once(':') {
            Some((h, a)) => (h.to_string(), Some(a.to_string())),
            None => (s.clone(), None),
        };
        let regime = match head.as_str() {
            "conditional" => Regime::Conditional,
            "unconditional" => Regime::Unconditional,
            "many-clusters" | "uncond-many-clusters" => Regime::UncondManyClusters,
            "large-clusters" | "uncond-large-clusters" => Regime::UncondLargeClusters,
            "auto" => Regime::Auto,
            "balanced" | "uncond-balanced" => {
                let gamma = arg
                    .as_deref()
                    .ok_or_else(|| PqlError::InvalidArgument("balanced regime needs a gamma, e.g. balanced:2".into()))?
                    .parse::<f64>()
                    .map_err(|e| PqlError::InvalidArgument(format!("bad gamma: {e}")))?;
                return Regime::UncondBalanced { gamma }.resolve(1, 1, &InferenceSettings::default());
            }
            other => return Err(PqlError::InvalidArgument(format!("unknown regime '{other}'"))),
        };
        if arg.is_some() {
            return Err(PqlError::InvalidArgument(format!("regime '{head}' takes no argument")));
        }
        Ok(regime)
    }
}

/// Distribution the interval quantiles come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Basis {
    #[serde(rename = "normal")]
    Normal,
    #[serde(rename = "mixN")]
    MixN,
    #[serde(rename = "convolution")]
    Convolution,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetKind {
    FixedEffect,
    RandomEffect,
    LinearCombo,
}

/// A linear functional `a' beta`, `a' b_i` or `a' (beta + b_i)`.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetSelection {
    pub kind: TargetKind,
    pub cluster_index: Option<usize>,
    pub coeffs: DVector<f64>,
}

impl TargetSelection {
    pub fn fixed_effect(k: usize, p: usize) -> Self {
        TargetSelection { kind: TargetKind::FixedEffect, cluster_index: None, coeffs: unit(k, p) }
    }

    pub fn random_effect(cluster: usize, k: usize, p: usize) -> Self {
        TargetSelection { kind: TargetKind::RandomEffect, cluster_index: Some(cluster), coeffs: unit(k, p) }
    }

    pub fn linear_combo(cluster: usize, a: DVector<f64>) -> Self {
        TargetSelection { kind: TargetKind::LinearCombo, cluster_index: Some(cluster), coeffs: a }
    }

    pub fn label(&self) -> String {
        let single = self.coeffs.iter().filter(|v| **v != 0.0).count() == 1;
        let comp = self.coeffs.iter().position(|v| *v != 0.0).map(|k| k + 1);
        match (self.kind, self.cluster_index, single, comp) {
            (TargetKind::FixedEffect, _, true, Some(k)) if self.coeffs[k - 1] == 1.0 => format!("beta[{k}]"),
            (TargetKind::RandomEffect, Some(i), true, Some(k)) if self.coeffs[k - 1] == 1.0 => format!("b[{}][{k}]", i + 1),
            (TargetKind::FixedEffect, ..) => format!("a'beta (a={})", fmt_vec(&self.coeffs)),
            (TargetKind::RandomEffect, i, ..) => format!("a'b[{}] (a={})", i.map_or(0, |i| i + 1), fmt_vec(&self.coeffs)),
            (TargetKind::LinearCombo, i, ..) => {
                format!("a'(beta+b[{}]) (a={})", i.map_or(0, |i| i + 1), fmt_vec(&self.coeffs))
            }
        }
    }
}

fn fmt_vec(v: &DVector<f64>) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(";")
}

fn unit(k: usize, p: usize) -> DVector<f64> {
    let mut v = DVector::zeros(p);
    if k < p {
        v[k] = 1.0;
    }
    v
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntervalResult {
    pub target: String,
    pub estimate: f64,
    pub lower: f64,
    pub upper: f64,
    pub level: f64,
    pub basis: Basis,
    pub regime: Regime,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

impl IntervalResult {
    pub fn covers(&self, value: f64) -> bool {
        self.lower <= value && value <= self.upper
    }

    pub fn halfwidth(&self) -> f64 {
        0.5 * (self.upper - self.lower)
    }
}

/// Monte Carlo and regime-selection settings shared by interval builders.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InferenceSettings {
    /// Draws used to approximate normal scale-mixture quantiles.
    pub n_draws: usize,
    /// `m / n_i` at or above which `Auto` picks the many-clusters case.
    pub many_clusters_ratio: f64,
    /// `m / n_i` at or below which `Auto` picks the large-clusters case.
    pub large_clusters_ratio: f64,
}

impl Default for InferenceSettings {
    fn default() -> Self {
        InferenceSettings { n_draws: 10_000, many_clusters_ratio: 3.0, large_clusters_ratio: 1.0 / 3.0 }
    }
}

impl InferenceSettings {
    pub fn validate(&self) -> Result<()> {
        if self.n_draws == 0 {
            return Err(PqlError::InvalidArgument("n_draws must be at least 1".into()));
        }
        if !(self.large_clusters_ratio > 0.0 && self.large_clusters_ratio < self.many_clusters_ratio) {
            return Err(PqlError::InvalidArgument("regime thresholds must satisfy 0 < large < many".into()));
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

/// Standard normal quantile.
pub fn normal_quantile(p: f64) -> f64 {
    Normal::standard().inverse_cdf(p)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn auto_rule() {
        let s = InferenceSettings::default();
        assert_eq!(Regime::Auto.resolve(400, 25, &s).unwrap(), Regime::UncondManyClusters);
        assert_eq!(Regime::Auto.resolve(25, 400, &s).unwrap(), Regime::UncondLargeClusters);
        assert_eq!(Regime::Auto.resolve(100, 50, &s).unwrap(), Regime::UncondBalanced { gamma: 2.0 });
        assert_eq!(Regime::Auto.resolve(75, 25, &s).unwrap(), Regime::UncondManyClusters);
    }

    #[test]
    fn parse_regimes() {
        assert_eq!("auto".parse::<Regime>().unwrap(), Regime::Auto);
        assert_eq!("balanced:2.5".parse::<Regime>().unwrap(), Regime::UncondBalanced { gamma: 2.5 });
        assert_eq!("uncond_many_clusters".parse::<Regime>().unwrap(), Regime::UncondManyClusters);
        assert!("balanced".parse::<Regime>().is_err());
        assert!("balanced:-1".parse::<Regime>().is_err());
        assert!("sideways".parse::<Regime>().is_err());
        for r in [Regime::Conditional, Regime::UncondLargeClusters, Regime::UncondBalanced { gamma: 0.5 }] {
            assert_eq!(r.to_string().parse::<Regime>().unwrap(), r);
        }
    }

    #[test]
    fn quantile_values() {
        assert!((normal_quantile(0.975) - 1.959964).abs() < 1e-6);
        assert!(check_level(1.5).is_err());
        assert!(check_level(0.0).is_err());
    }

    #[test]
    fn labels() {
        assert_eq!(TargetSelection::fixed_effect(0, 3).label(), "beta[1]");
        assert_eq!(TargetSelection::random_effect(6, 1, 3).label(), "b[7][2]");
    }
}
