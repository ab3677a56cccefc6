use std::collections::{HashMap, HashSet};
use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use sha2::{Digest, Sha256};

use super::config::ColumnMap;
use crate::error::{PqlError, Result};
use crate::pql::{ClusterData, ClusteredDesign};

/// A clustered data set read from CSV, clusters in first-appearance order.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub design: ClusteredDesign,
    pub cluster_ids: Vec<String>,
    pub fixed_names: Vec<String>,
    pub random_names: Vec<String>,
    /// SHA-256 over the file bytes and the column mapping.
    pub data_hash: String,
}

impl Dataset {
    pub fn cluster_index(&self, id: &str) -> Result<usize> {
        self.cluster_ids
            .iter()
            .position(|c| c == id)
            .ok_or_else(|| PqlError::InvalidArgument(format!("unknown cluster id '{id}'")))
    }
}

fn default_fixed(headers: &[String]) -> Vec<String> {
    headers
        .iter()
        .filter(|h| h.len() > 1 && h.starts_with('x') && h[1..].chars().all(|c| c.is_ascii_digit()))
        .cloned()
        .collect()
}

pub fn load_dataset(path: &Path, columns: &ColumnMap, partnered: bool) -> Result<Dataset> {
    let bytes = fs::read(path).map_err(|e| PqlError::Io(format!("{}: {e}", path.display())))?;
    parse_dataset(&bytes, columns, partnered)
}

pub fn parse_dataset(bytes: &[u8], columns: &ColumnMap, partnered: bool) -> Result<Dataset> {
    if bytes.iter().all(|b| b.is_ascii_whitespace()) {
        return Err(PqlError::Parse("data file is empty".into()));
    }
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(bytes);
    let headers: Vec<String> = rdr
        .headers()
        .map_err(|e| PqlError::Parse(format!("header: {e}")))?
        .iter()
        .map(String::from)
        .collect();
    let mut seen = HashSet::new();
    for h in &headers {
        if !seen.insert(h.as_str()) {
            return Err(PqlError::Parse(format!("duplicate column name '{h}'")));
        }
    }
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| PqlError::Parse(format!("missing column '{name}'")))
    };
    let fixed_names = if columns.fixed.is_empty() { default_fixed(&headers) } else { columns.fixed.clone() };
    let random_names = columns.random.clone().unwrap_or_else(|| fixed_names.clone());
    if random_names.is_empty() {
        return Err(PqlError::Parse("no random-effect columns (name x1, x2, ... or set columns.random)".into()));
    }
    let cluster_col = col(&columns.cluster)?;
    let y_col = col(&columns.response)?;
    let fixed_cols = fixed_names.iter().map(|n| col(n)).collect::<Result<Vec<_>>>()?;
    let random_cols = random_names.iter().map(|n| col(n)).collect::<Result<Vec<_>>>()?;
    let trials_col = columns.trials.as_deref().map(col).transpose()?;

    struct Acc {
        y: Vec<f64>,
        x: Vec<Vec<f64>>,
        z: Vec<Vec<f64>>,
        t: Vec<f64>,
    }
    let mut order: Vec<String> = Vec::new();
    let mut groups: HashMap<String, Acc> = HashMap::new();
    for (r, rec) in rdr.records().enumerate() {
        let line = r + 2;
        let rec = rec.map_err(|e| PqlError::Parse(format!("row {line}: {e}")))?;
        let cell = |c: usize| -> Result<f64> {
            let s = rec.get(c).unwrap_or("");
            if s.is_empty() {
                return Err(PqlError::Parse(format!("row {line}, column '{}': missing value", headers[c])));
            }
            let v: f64 = s
                .parse()
                .map_err(|_| PqlError::Parse(format!("row {line}, column '{}': '{s}' is not a number", headers[c])))?;
            if !v.is_finite() {
                return Err(PqlError::Parse(format!("row {line}, column '{}': non-finite value", headers[c])));
            }
            Ok(v)
        };
        let id = rec.get(cluster_col).unwrap_or("").to_string();
        if id.is_empty() {
            return Err(PqlError::Parse(format!("row {line}, column '{}': missing cluster id", columns.cluster)));
        }
        let y = cell(y_col)?;
        let x = fixed_cols.iter().map(|&c| cell(c)).collect::<Result<Vec<_>>>()?;
        let z = random_cols.iter().map(|&c| cell(c)).collect::<Result<Vec<_>>>()?;
        let t = trials_col.map(cell).transpose()?.unwrap_or(1.0);
        let acc = groups.entry(id.clone()).or_insert_with(|| {
            order.push(id.clone());
            Acc { y: Vec::new(), x: Vec::new(), z: Vec::new(), t: Vec::new() }
        });
        acc.y.push(y);
        acc.x.push(x);
        acc.z.push(z);
        acc.t.push(t);
    }
    if order.is_empty() {
        return Err(PqlError::Parse("data file has a header but no rows".into()));
    }
    let clusters = order
        .iter()
        .map(|id| {
            let a = &groups[id];
            let n = a.y.len();
            let x = DMatrix::from_fn(n, fixed_cols.len(), |i, j| a.x[i][j]);
            let z = DMatrix::from_fn(n, random_cols.len(), |i, j| a.z[i][j]);
            let c = ClusterData::new(DVector::from_vec(a.y.clone()), x, z);
            if trials_col.is_some() {
                c.with_trials(DVector::from_vec(a.t.clone()))
            } else {
                c
            }
        })
        .collect();
    let design = if partnered {
        ClusteredDesign::with_partnering(clusters, true)?
    } else {
        ClusteredDesign::new(clusters)?
    };
    let mut h = Sha256::new();
    h.update(bytes);
    h.update(serde_json::to_vec(columns).map_err(|e| PqlError::Io(e.to_string()))?);
    h.update([u8::from(partnered)]);
    Ok(Dataset { design, cluster_ids: order, fixed_names, random_names, data_hash: hex::encode(h.finalize()) })
}
