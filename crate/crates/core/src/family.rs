//! Canonical exponential families.
//!
//! Every family uses its canonical link, so the natural parameter equals
//! the linear predictor and the log density of one observation is
//! `(y * eta - a(eta)) / phi + c(y, phi)`.
//!
//! A binomial observation with `k` trials contributes `k * a(eta)` to the
//! cumulant; the trial count is carried per observation by the design and
//! passed in as `trials`. Every other family uses `trials = 1`.
//!
//! Poisson-log does not have a globally bounded `a''`; the usual regularity
//! conditions only hold on a compact parameter set. Nothing here enforces
//! that.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::error::{PqlError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Gaussian,
    Poisson,
    Bernoulli,
    Binomial,
}

/// `log(1 + exp(x))` without overflow.
pub fn log1p_exp(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Logistic function, split on sign so neither branch overflows.
pub fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn finite(eta: f64) -> Result<()> {
    if eta.is_finite() {
        Ok(())
    } else {
        Err(PqlError::Domain(format!("linear predictor must be finite, got {eta}")))
    }
}

impl Family {
    pub const ALL: [Family; 4] = [Family::Gaussian, Family::Poisson, Family::Bernoulli, Family::Binomial];

    pub fn name(self) -> &'static str {
        match self {
            Family::Gaussian => "gaussian",
            Family::Poisson => "poisson",
            Family::Bernoulli => "bernoulli",
            Family::Binomial => "binomial",
        }
    }

    /// Dispersion fixed by the family, `None` when it has to be estimated.
    pub fn known_dispersion(self) -> Option<f64> {
        match self {
            Family::Gaussian => None,
            Family::Poisson | Family::Bernoulli | Family::Binomial => Some(1.0),
        }
    }

    /// Cumulant `a(eta)` for a single trial.
    pub fn cumulant(self, eta: f64) -> Result<f64> {
        finite(eta)?;
        Ok(self.cumulant_unchecked(eta))
    }

    pub(crate) fn cumulant_unchecked(self, eta: f64) -> f64 {
        match self {
            Family::Gaussian => 0.5 * eta * eta,
            Family::Poisson => eta.exp(),
            Family::Bernoulli | Family::Binomial => log1p_exp(eta),
        }
    }

    /// `(a'(eta), a''(eta), a'''(eta))` for a single trial.
    pub fn cumulant_derivs(self, eta: f64) -> Result<(f64, f64, f64)> {
        finite(eta)?;
        Ok(self.derivs_unchecked(eta))
    }

    pub(crate) fn derivs_unchecked(self, eta: f64) -> (f64, f64, f64) {
        match self {
            Family::Gaussian => (eta, 1.0, 0.0),
            Family::Poisson => {
                let e = eta.exp();
                (e, e, e)
            }
            Family::Bernoulli | Family::Binomial => {
                let s = logistic(eta);
                // 1 - s computed from the mirrored logistic keeps precision for large eta
                let one_minus = logistic(-eta);
                let v = s * one_minus;
                (s, v, v * (one_minus - s))
            }
        }
    }

    /// Mean and variance function, `(a'(eta), a''(eta))`.
    #[inline]
    pub(crate) fn mean_var(self, eta: f64) -> (f64, f64) {
        match self {
            Family::Gaussian => (eta, 1.0),
            Family::Poisson => {
                let e = eta.exp();
                (e, e)
            }
            Family::Bernoulli | Family::Binomial => {
                let s = logistic(eta);
                (s, s * logistic(-eta))
            }
        }
    }

    /// Checks that `y` is a possible response with the given trial count.
    pub fn check_support(self, y: f64, trials: f64) -> Result<()> {
        let bad = |why: &str| Err(PqlError::Domain(format!("{} response {y} {why}", self.name())));
        if !y.is_finite() {
            return bad("is not finite");
        }
        match self {
            Family::Gaussian => Ok(()),
            Family::Poisson => {
                if y < 0.0 || y.fract() != 0.0 {
                    bad("is not a non-negative integer")
                } else {
                    Ok(())
                }
            }
            Family::Bernoulli => {
                if y == 0.0 || y == 1.0 {
                    Ok(())
                } else {
                    bad("is not 0 or 1")
                }
            }
            Family::Binomial => {
                if !(trials >= 1.0 && trials.fract() == 0.0) {
                    return Err(PqlError::Domain(format!("binomial trial count {trials} must be a positive integer")));
                }
                if y < 0.0 || y > trials || y.fract() != 0.0 {
                    bad(&format!("is not an integer in 0..={trials}"))
                } else {
                    Ok(())
                }
            }
        }
    }

    /// Log density of one observation with a single trial.
    pub fn log_density(self, y: f64, eta: f64, phi: f64) -> Result<f64> {
        self.log_density_trials(y, eta, phi, 1.0)
    }

    /// Log density of one observation with `trials` binomial trials
    /// (`trials` must be 1 for every other family).
    pub fn log_density_trials(self, y: f64, eta: f64, phi: f64, trials: f64) -> Result<f64> {
        finite(eta)?;
        if !(phi > 0.0 && phi.is_finite()) {
            return Err(PqlError::Domain(format!("dispersion must be positive, got {phi}")));
        }
        if self != Family::Binomial && trials != 1.0 {
            return Err(PqlError::Domain(format!("{} observations carry exactly one trial", self.name())));
        }
        self.check_support(y, trials)?;
        Ok(self.log_density_unchecked(y, eta, phi, trials))
    }

    pub(crate) fn log_density_unchecked(self, y: f64, eta: f64, phi: f64, trials: f64) -> f64 {
        let kernel = (y * eta - trials * self.cumulant_unchecked(eta)) / phi;
        kernel + self.log_base_measure(y, phi, trials)
    }

    /// `c(y, phi)`.
    pub(crate) fn log_base_measure(self, y: f64, phi: f64, trials: f64) -> f64 {
        match self {
            Family::Gaussian => -y * y / (2.0 * phi) - 0.5 * (2.0 * PI * phi).ln(),
            Family::Poisson => -ln_gamma(y + 1.0),
            Family::Bernoulli => 0.0,
            Family::Binomial => ln_gamma(trials + 1.0) - ln_gamma(y + 1.0) - ln_gamma(trials - y + 1.0),
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Family {
    type Err = PqlError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "gaussian" => Ok(Family::Gaussian),
            "poisson" => Ok(Family::Poisson),
            "bernoulli" => Ok(Family::Bernoulli),
            "binomial" => Ok(Family::Binomial),
            other => Err(PqlError::InvalidArgument(format!(
                "unknown family '{other}' (expected gaussian, poisson, bernoulli or binomial)"
            ))),
        }
    }
}
