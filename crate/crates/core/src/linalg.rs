//! Small dense linear-algebra helpers over `ndarray`, backed by `nalgebra`
//! for the symmetric eigendecomposition and Cholesky factorisation.

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{Array1, Array2};

use crate::error::{Error, Result};

fn to_na(m: &Array2<f64>) -> DMatrix<f64> {
    let (r, c) = m.dim();
    DMatrix::from_fn(r, c, |i, j| m[[i, j]])
}

fn from_na(m: &DMatrix<f64>) -> Array2<f64> {
    Array2::from_shape_fn((m.nrows(), m.ncols()), |(i, j)| m[(i, j)])
}

/// (M + Mᵀ) / 2.
pub fn symmetrize(m: &Array2<f64>) -> Array2<f64> {
    (m + &m.t()) * 0.5
}

/// Eigenvalues (ascending) and eigenvectors (columns) of the symmetric part of `m`.
pub fn sym_eigen(m: &Array2<f64>) -> (Array1<f64>, Array2<f64>) {
    let eig = SymmetricEigen::new(to_na(&symmetrize(m)));
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let values = Array1::from_iter(order.iter().map(|&i| eig.eigenvalues[i]));
    let n = m.nrows();
    let vectors = Array2::from_shape_fn((n, n), |(r, c)| eig.eigenvectors[(r, order[c])]);
    (values, vectors)
}

/// V diag(λ) Vᵀ, symmetrised so the result is exactly symmetric.
pub fn reconstruct(values: &Array1<f64>, vectors: &Array2<f64>) -> Array2<f64> {
    let scaled = vectors * &values.view().insert_axis(ndarray::Axis(0));
    let m = scaled.dot(&vectors.t());
    symmetrize(&m)
}

/// Largest eigenvalue of the symmetric part of `m`.
pub fn max_eigenvalue(m: &Array2<f64>) -> f64 {
    let (values, _) = sym_eigen(m);
    values.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
}

/// Cholesky factor of the symmetric part of `m`, or `NotSpd`.
fn cholesky(m: &Array2<f64>) -> Result<nalgebra::Cholesky<f64, nalgebra::Dyn>> {
    nalgebra::Cholesky::new(to_na(&symmetrize(m))).ok_or_else(|| Error::NotSpd(String::new()))
}

/// ln det of the symmetric part of `m`; fails unless it is positive definite.
pub fn spd_logdet(m: &Array2<f64>) -> Result<f64> {
    let chol = cholesky(m)?;
    let l = chol.l_dirty();
    Ok((0..m.nrows()).map(|i| 2.0 * l[(i, i)].ln()).sum())
}

/// Inverse of the symmetric part of `m`; fails unless it is positive definite.
pub fn spd_inverse(m: &Array2<f64>) -> Result<Array2<f64>> {
    let inv = cholesky(m)?.inverse();
    Ok(symmetrize(&from_na(&inv)))
}

/// Frobenius norm.
pub fn frobenius(m: &Array2<f64>) -> f64 {
    m.iter().map(|v| v * v).sum::<f64>().sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn eigen_reconstructs() {
        let m = array![[2.0, 1.0], [1.0, 3.0]];
        let (vals, vecs) = sym_eigen(&m);
        assert!(vals[0] <= vals[1]);
        let back = reconstruct(&vals, &vecs);
        for (a, b) in back.iter().zip(m.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn logdet_and_inverse() {
        let m = array![[4.0, 0.0], [0.0, 0.25]];
        assert!(spd_logdet(&m).unwrap().abs() < 1e-15);
        let inv = spd_inverse(&m).unwrap();
        assert!((inv[[0, 0]] - 0.25).abs() < 1e-15);
        assert!((inv[[1, 1]] - 4.0).abs() < 1e-15);
        assert!(spd_logdet(&array![[-1.0]]).is_err());
    }
}
