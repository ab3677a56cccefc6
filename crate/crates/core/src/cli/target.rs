use std::str::FromStr;

use crate::error::{PqlError, Result};

/// A `--target` request. Components are 1-based on the command line and
/// stored 0-based.
#[derive(Debug, Clone, PartialEq)]
pub enum TargetSpec {
    /// `beta:K`
    Beta { k: usize },
    /// `b:cluster=ID[,k=K]`
    RandomEffect { cluster: String, k: Option<usize> },
    /// `gap:cluster=ID[,k=K]`
    Gap { cluster: String, k: Option<usize> },
    /// `lp:cluster=ID,a=A1;A2;...`
    LinearPredictor { cluster: String, a: Vec<f64> },
}

fn component(s: &str) -> Result<usize> {
    let k: usize = s.parse().map_err(|_| PqlError::InvalidArgument(format!("bad component '{s}'")))?;
    k.checked_sub(1).ok_or_else(|| PqlError::InvalidArgument("components are numbered from 1".into()))
}

impl FromStr for TargetSpec {
    type Err = PqlError;

    fn from_str(s: &str) -> Result<Self> {
        let bad = |msg: &str| PqlError::InvalidArgument(format!("target '{s}': {msg}"));
        let (kind, rest) = s.split_once(':').ok_or_else(|| bad("expected <kind>:<args>"))?;
        if kind == "beta" {
            return Ok(TargetSpec::Beta { k: component(rest.trim())? });
        }
        let mut cluster = None;
        let mut k = None;
        let mut a = None;
        for part in rest.split(',') {
            let (key, val) = part.split_once('=').ok_or_else(|| bad("expected key=value pairs"))?;
            match key.trim() {
                "cluster" => cluster = Some(val.trim().to_string()),
                "k" => k = Some(component(val.trim())?),
                "a" => {
                    a = Some(
                        val.split(';')
                            .map(|v| v.trim().parse::<f64>().map_err(|_| bad("coefficients must be numbers")))
                            .collect::<Result<Vec<_>>>()?,
                    )
                }
                other => return Err(bad(&format!("unknown key '{other}'"))),
            }
        }
        let cluster = cluster.filter(|c| !c.is_empty()).ok_or_else(|| bad("cluster=<id> is required"))?;
        match kind {
            "b" if a.is_none() => Ok(TargetSpec::RandomEffect { cluster, k }),
            "gap" if a.is_none() => Ok(TargetSpec::Gap { cluster, k }),
            "lp" if k.is_none() => Ok(TargetSpec::LinearPredictor { cluster, a: a.ok_or_else(|| bad("a=<coeffs> is required"))? }),
            "b" | "gap" | "lp" => Err(bad("unexpected key for this kind")),
            _ => Err(bad("kind must be beta, b, gap or lp")),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grammar() {
        assert_eq!("beta:1".parse::<TargetSpec>().unwrap(), TargetSpec::Beta { k: 0 });
        assert_eq!(
            "gap:cluster=7".parse::<TargetSpec>().unwrap(),
            TargetSpec::Gap { cluster: "7".into(), k: None }
        );
        assert_eq!(
            "b:cluster=a,k=2".parse::<TargetSpec>().unwrap(),
            TargetSpec::RandomEffect { cluster: "a".into(), k: Some(1) }
        );
        assert_eq!(
            "lp:cluster=3,a=1;0.5".parse::<TargetSpec>().unwrap(),
            TargetSpec::LinearPredictor { cluster: "3".into(), a: vec![1.0, 0.5] }
        );
        for bad in ["beta:0", "beta", "gap:k=1", "lp:cluster=1", "zeta:cluster=1", "b:cluster=1,a=1"] {
            assert!(bad.parse::<TargetSpec>().is_err(), "{bad}");
        }
    }
}
