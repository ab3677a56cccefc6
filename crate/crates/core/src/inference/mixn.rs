use nalgebra::{DMatrix, DVector};
use statrs::distribution::{Continuous, ContinuousCDF, Normal};

use crate::error::{PqlError, Result};
use crate::linalg;
use crate::rng::{shared_stream, std_normal_vec, Purpose};

pub type CondCovFn<'a> = Box<dyn Fn(&DVector<f64>) -> Result<DMatrix<f64>> + Sync + 'a>;

/// Normal scale mixture `v | b ~ N(0, cond_cov_fn(b))`, `b ~ N(0, mixing_cov)`,
/// optionally convolved with an independent `N(0, extra_normal_cov)`.
///
/// The mixing dimension (`mixing_cov`) and output dimension (what
/// `cond_cov_fn` returns) may differ, e.g. a scalar functional `a'v`.
pub struct MixNSpec<'a> {
    pub cond_cov_fn: CondCovFn<'a>,
    pub mixing_cov: DMatrix<f64>,
    pub extra_normal_cov: Option<DMatrix<f64>>,
    pub n_draws: usize,
}

impl<'a> MixNSpec<'a> {
    pub fn new(
        cond_cov_fn: impl Fn(&DVector<f64>) -> Result<DMatrix<f64>> + Sync + 'a,
        mixing_cov: DMatrix<f64>,
        n_draws: usize,
    ) -> Self {
        MixNSpec { cond_cov_fn: Box::new(cond_cov_fn), mixing_cov, extra_normal_cov: None, n_draws }
    }

    pub fn with_extra_normal(mut self, cov: DMatrix<f64>) -> Self {
        self.extra_normal_cov = Some(cov);
        self
    }

    /// Simulated draws, one column per draw.
    pub fn draws(&self, seed: u64) -> Result<DMatrix<f64>> {
        if self.n_draws == 0 {
            return Err(PqlError::InvalidArgument("n_draws must be at least 1".into()));
        }
        let mix_root = psd_root(&self.mixing_cov, "mixing covariance")?;
        let extra_root = match &self.extra_normal_cov {
            Some(c) => Some(psd_root(c, "extra normal covariance")?),
            None => None,
        };
        let mut rng = shared_stream(seed, Purpose::MixtureDraws);
        let mut out: Option<DMatrix<f64>> = None;
        for d in 0..self.n_draws {
            let b = &mix_root * std_normal_vec(&mut rng, mix_root.ncols());
            let cov = (self.cond_cov_fn)(&b)?;
            let root = linalg::psd_sqrt(&cov).ok_or_else(|| {
                PqlError::Numerical(format!("conditional covariance at mixture draw {d} is not positive semidefinite"))
            })?;
            let mut v = &root * std_normal_vec(&mut rng, root.ncols());
            if let Some(er) = &extra_root {
                if er.nrows() != v.len() {
                    return Err(PqlError::Dimension(format!(
                        "extra normal covariance is {}x{}, draws have dimension {}",
                        er.nrows(),
                        er.ncols(),
                        v.len()
                    )));
                }
                v += er * std_normal_vec(&mut rng, er.ncols());
            }
            let out = out.get_or_insert_with(|| DMatrix::zeros(v.len(), self.n_draws));
            if v.len() != out.nrows() {
                return Err(PqlError::Dimension("conditional covariance changed size between draws".into()));
            }
            out.set_column(d, &v);
        }
        Ok(out.expect("n_draws >= 1"))
    }
}

fn psd_root(m: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    if !m.is_square() {
        return Err(PqlError::Dimension(format!("{what} must be square")));
    }
    linalg::psd_sqrt(m).ok_or_else(|| PqlError::Numerical(format!("{what} is not positive semidefinite")))
}

/// Type-7 quantile of an ascending sample.
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = (n - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Empirical quantiles of the mixture: `out[k][j]` is the `probs[j]`
/// quantile of component `k`.
pub fn mixn_quantiles(spec: &MixNSpec<'_>, probs: &[f64], seed: u64) -> Result<Vec<Vec<f64>>> {
    if let Some(p) = probs.iter().find(|p| !(**p > 0.0 && **p < 1.0)) {
        return Err(PqlError::InvalidArgument(format!("quantile level {p} outside (0, 1)")));
    }
    let draws = spec.draws(seed)?;
    Ok(draws
        .row_iter()
        .map(|row| {
            let mut v: Vec<f64> = row.iter().copied().collect();
            v.sort_by(f64::total_cmp);
            probs.iter().map(|&p| quantile_sorted(&v, p)).collect()
        })
        .collect())
}

/// Large-sample standard error of the `p` sample quantile from `n` draws
/// of `N(0, sd^2)`.
pub fn quantile_standard_error(sd: f64, p: f64, n: usize) -> f64 {
    let std = Normal::standard();
    let z = std.inverse_cdf(p);
    sd * (p * (1.0 - p) / n as f64).sqrt() / std.pdf(z)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn type7_matches_reference() {
        let v = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(quantile_sorted(&v, 0.5), 2.5);
        assert!((quantile_sorted(&v, 0.1) - 1.3).abs() < 1e-12);
        assert_eq!(quantile_sorted(&[5.0], 0.3), 5.0);
    }

    #[test]
    fn non_psd_draw_is_named() {
        let spec = MixNSpec::new(|_| Ok(DMatrix::from_element(1, 1, -1.0)), DMatrix::identity(1, 1), 5);
        let err = mixn_quantiles(&spec, &[0.5], 1).unwrap_err().to_string();
        assert!(err.contains("draw 0"), "{err}");
    }
}
