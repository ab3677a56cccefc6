//! Shapiro-Wilk W test with Royston's (1992, 1995) coefficient and p-value
//! approximations (algorithm AS R94, uncensored case).

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{PqlError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShapiroWilk {
    pub w: f64,
    pub p_value: f64,
}

const C1: [f64; 6] = [0.0, 0.221157, -0.147981, -2.071190, 4.434685, -2.706056];
const C2: [f64; 6] = [0.0, 0.042981, -0.293762, -1.752461, 5.682633, -3.582633];
const C3: [f64; 4] = [0.5440, -0.39978, 0.025054, -6.714e-4];
const C4: [f64; 4] = [1.3822, -0.77857, 0.062767, -0.0020322];
const C5: [f64; 4] = [-1.5861, -0.31082, -0.083751, 0.0038915];
const C6: [f64; 3] = [-0.4803, -0.082676, 0.0030302];
const G: [f64; 2] = [-2.273, 0.459];
const SMALL: f64 = 1e-19;

fn poly(c: &[f64], x: f64) -> f64 {
    c.iter().rev().fold(0.0, |acc, &ci| acc * x + ci)
}

/// Coefficients for the upper half of the order statistics; the lower
/// half is the negated mirror image.
fn coefficients(n: usize, std: &Normal) -> Vec<f64> {
    let nn2 = n / 2;
    if n == 3 {
        return vec![std::f64::consts::FRAC_1_SQRT_2];
    }
    let an25 = n as f64 + 0.25;
    // m[i] for the i-th largest order statistic
    let m: Vec<f64> = (0..nn2).map(|i| -std.inverse_cdf((i as f64 + 1.0 - 0.375) / an25)).collect();
    let summ2 = 2.0 * m.iter().map(|v| v * v).sum::<f64>();
    let ssumm2 = summ2.sqrt();
    let rsn = 1.0 / (n as f64).sqrt();
    let a1 = poly(&C1, rsn) + m[0] / ssumm2;
    let mut a = vec![0.0; nn2];
    let (start, fac) = if n > 5 {
        let a2 = m[1] / ssumm2 + poly(&C2, rsn);
        let fac = ((summ2 - 2.0 * m[0] * m[0] - 2.0 * m[1] * m[1]) / (1.0 - 2.0 * a1 * a1 - 2.0 * a2 * a2)).sqrt();
        a[1] = a2;
        (2, fac)
    } else {
        (1, ((summ2 - 2.0 * m[0] * m[0]) / (1.0 - 2.0 * a1 * a1)).sqrt())
    };
    a[0] = a1;
    for i in start..nn2 {
        a[i] = m[i] / fac;
    }
    a
}

/// W statistic and upper-tail p-value for 3 <= n <= 5000.
pub fn shapiro_wilk(sample: &[f64]) -> Result<ShapiroWilk> {
    let n = sample.len();
    if !(3..=5000).contains(&n) {
        return Err(PqlError::Unsupported(format!("Shapiro-Wilk needs 3 to 5000 observations, got {n}")));
    }
    if sample.iter().any(|v| !v.is_finite()) {
        return Err(PqlError::Domain("Shapiro-Wilk sample contains non-finite values".into()));
    }
    let mut x = sample.to_vec();
    x.sort_by(f64::total_cmp);
    let range = x[n - 1] - x[0];
    if range < SMALL * x[n - 1].abs().max(1.0) {
        return Err(PqlError::Domain("Shapiro-Wilk sample is constant".into()));
    }
    let std = Normal::standard();
    let a = coefficients(n, &std);
    let mean = x.iter().sum::<f64>() / n as f64;
    let ssx: f64 = x.iter().map(|v| (v - mean) * (v - mean)).sum();
    let num: f64 = a.iter().enumerate().map(|(i, ai)| ai * (x[n - 1 - i] - x[i])).sum();
    let w = (num * num / ssx).min(1.0);
    let w1 = 1.0 - w;

    if n == 3 {
        let w = w.max(0.75);
        let p = 1.0 - 6.0 / std::f64::consts::PI * w.sqrt().acos();
        return Ok(ShapiroWilk { w, p_value: p.clamp(0.0, 1.0) });
    }
    let y = w1.ln();
    let nf = n as f64;
    let p = if n <= 11 {
        let gamma = poly(&G, nf);
        if y >= gamma {
            SMALL
        } else {
            let yt = -(gamma - y).ln();
            let mu = poly(&C3, nf);
            let sigma = poly(&C4, nf).exp();
            std.sf((yt - mu) / sigma)
        }
    } else {
        let ln_n = nf.ln();
        let mu = poly(&C5, ln_n);
        let sigma = poly(&C6, ln_n).exp();
        std.sf((y - mu) / sigma)
    };
    Ok(ShapiroWilk { w, p_value: p })
}

#[cfg(test)]
mod tests {
    use super::*;

    // reference values from an independent AS R94 implementation
    #[test]
    fn matches_reference_values() {
        let cases: Vec<(Vec<f64>, f64, f64)> = vec![
            (vec![2.0, 1.0, 4.0], 0.9642857142857142, 0.6368868450289689),
            (vec![1.0, 2.0, 3.0, 4.0, 10.0], 0.8357883166461942, 0.1536125843490888),
            (vec![0.3, -1.2, 0.8, 2.5, -0.4, 0.1, 1.7, -2.2, 0.9, 0.05], 0.9849837436029986, 0.9862292336952352),
            ((1..=30).map(|i| (i as f64).powf(1.5)).collect(), 0.9345615457434135, 0.06497732401750264),
        ];
        for (x, w, p) in &cases {
            let r = shapiro_wilk(x).unwrap();
            assert!((r.w - w).abs() < 1e-6, "{} vs {w}", r.w);
            assert!((r.p_value - p).abs() < 1e-5, "{} vs {p}", r.p_value);
        }
    }

    #[test]
    fn rejects_bad_sizes() {
        assert!(shapiro_wilk(&[1.0, 2.0]).is_err());
        assert!(shapiro_wilk(&vec![0.5; 10]).is_err());
        assert!(shapiro_wilk(&vec![0.0; 5001]).is_err());
    }
}
