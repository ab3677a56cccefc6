use nalgebra::DMatrix;

use crate::error::{PqlError, Result};
use crate::linalg;
use crate::pql::HessianBlocks;

/// The fixed-effect Schur complement together with the per-cluster caps.
#[derive(Debug, Clone)]
pub struct SchurComplement {
    /// `C = B1 - sum_i B2_i cap_i B2_i'`, symmetrized.
    pub c: DMatrix<f64>,
    /// `cap_i = (Z_i' W_i Z_i + G^-1)^-1`.
    pub caps: Vec<DMatrix<f64>>,
}

pub fn schur_complement(blocks: &HessianBlocks) -> Result<SchurComplement> {
    let caps = blocks
        .b3
        .iter()
        .enumerate()
        .map(|(i, b3)| {
            linalg::spd_inverse(&(b3 + &blocks.b4)).ok_or(PqlError::SingularClusterBlock { cluster: i })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut c = blocks.b1.clone();
    if blocks.p_f() > 0 {
        for (b2, cap) in blocks.b2.iter().zip(&caps) {
            c -= b2 * cap * b2.transpose();
        }
    }
    Ok(SchurComplement { c: linalg::symmetrize(&c), caps })
}

/// The same complement for a partnered design written as
/// `G^-1 sum_i (I - cap_i G^-1)`. Only valid when `X_i = Z_i`; used to
/// cross-check [`schur_complement`].
pub fn schur_complement_partnered_alt(blocks: &HessianBlocks, caps: &[DMatrix<f64>]) -> Result<DMatrix<f64>> {
    let p = blocks.p_r();
    if blocks.p_f() != p {
        return Err(PqlError::Unsupported("alternative Schur form needs p_f = p_r".into()));
    }
    let g_inv = &blocks.b4;
    let mut acc = DMatrix::zeros(p, p);
    for cap in caps {
        acc += DMatrix::identity(p, p) - cap * g_inv;
    }
    Ok(linalg::symmetrize(&(g_inv * acc)))
}
