//! Small dense helpers on top of nalgebra. Every matrix handled here is
//! p x p with p the number of (fixed or random) effects, so nothing is
//! tuned for size.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

pub fn cholesky(m: &DMatrix<f64>) -> Option<Cholesky<f64, Dyn>> {
    Cholesky::new(symmetrize(m))
}

/// Inverse of a symmetric positive-definite matrix, symmetrized on return.
pub fn spd_inverse(m: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    cholesky(m).map(|c| symmetrize(&c.inverse()))
}

pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 {
        return f64::INFINITY;
    }
    SymmetricEigen::new(symmetrize(m))
        .eigenvalues
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min)
}

/// Raise every eigenvalue of a symmetric matrix to at least `floor`.
/// Returns the repaired matrix and whether any eigenvalue was clipped.
pub fn eigen_floor(m: &DMatrix<f64>, floor: f64) -> (DMatrix<f64>, bool) {
    let eig = SymmetricEigen::new(symmetrize(m));
    let mut clipped = false;
    let vals = eig.eigenvalues.map(|v| {
        if v < floor {
            clipped = true;
            floor
        } else {
            v
        }
    });
    if !clipped {
        return (symmetrize(m), false);
    }
    let v = &eig.eigenvectors;
    let out = v * DMatrix::from_diagonal(&vals) * v.transpose();
    (symmetrize(&out), true)
}

/// A square root `L` with `L L^T = m` for a symmetric positive
/// semidefinite `m`. Negative eigenvalues within roundoff are treated as
/// zero; anything clearly negative is rejected.
pub fn psd_sqrt(m: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let n = m.nrows();
    if n == 0 {
        return Some(DMatrix::zeros(0, 0));
    }
    if let Some(c) = cholesky(m) {
        return Some(c.l());
    }
    let eig = SymmetricEigen::new(symmetrize(m));
    let scale = eig.eigenvalues.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let tol = 1e-10 * scale.max(1e-300);
    let mut root = eig.eigenvectors.clone();
    for (j, &lam) in eig.eigenvalues.iter().enumerate() {
        if lam < -tol || !lam.is_finite() {
            return None;
        }
        let s = lam.max(0.0).sqrt();
        root.column_mut(j).scale_mut(s);
    }
    Some(root)
}

pub fn sup_norm(v: &DVector<f64>) -> f64 {
    v.iter().fold(0.0f64, |a, x| a.max(x.abs()))
}

pub fn frobenius(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).norm()
}
