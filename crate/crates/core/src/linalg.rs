//! Small dense linear-algebra helpers on top of `nalgebra`.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand_distr::{Distribution, StandardNormal};

use crate::seeds::Rng;
use crate::{Error, Result};

/// Largest condition number accepted by [`spd_solve`].
pub const MAX_CONDITION: f64 = 1e12;

/// Eigenvalues of the symmetric part of `m`, ascending.
pub fn sym_eigenvalues(m: &DMatrix<f64>) -> Vec<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let mut ev: Vec<f64> = SymmetricEigen::new(sym).eigenvalues.iter().copied().collect();
    ev.sort_by(|a, b| a.total_cmp(b));
    ev
}

pub fn lambda_min(m: &DMatrix<f64>) -> f64 {
    sym_eigenvalues(m).first().copied().unwrap_or(0.0)
}

/// Spectral norm of a symmetric matrix (largest absolute eigenvalue).
pub fn sym_spectral_norm(m: &DMatrix<f64>) -> f64 {
    sym_eigenvalues(m).iter().fold(0.0, |a, &v| f64::max(a, v.abs()))
}

/// Spectral norm of a general matrix (largest singular value).
pub fn spectral_norm(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    m.clone().svd(false, false).singular_values.iter().fold(0.0, |a, &v| f64::max(a, v))
}

/// Solves `m x = b` for symmetric positive definite `m` via Cholesky.
///
/// Rejects systems whose eigenvalue ratio exceeds [`MAX_CONDITION`] or whose
/// smallest eigenvalue is not positive.
pub fn spd_solve(m: &DMatrix<f64>, b: &DVector<f64>, what: &str) -> Result<DVector<f64>> {
    let x = spd_solve_mat(m, &DMatrix::from_column_slice(b.len(), 1, b.as_slice()), what)?;
    Ok(x.column(0).into_owned())
}

pub fn spd_solve_mat(m: &DMatrix<f64>, b: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    if m.nrows() != b.nrows() {
        return Err(Error::Dimension { what: "spd_solve rhs rows", expected: m.nrows(), got: b.nrows() });
    }
    let ev = sym_eigenvalues(m);
    let lo = ev.first().copied().unwrap_or(0.0);
    let hi = ev.last().copied().unwrap_or(0.0);
    if !(lo > 0.0) || hi / lo > MAX_CONDITION {
        return Err(Error::Degenerate { what: what.to_string(), lambda_min: lo });
    }
    let chol = m.clone().cholesky().ok_or_else(|| Error::Degenerate { what: what.to_string(), lambda_min: lo })?;
    Ok(chol.solve(b))
}

/// Haar-random orthogonal matrix (QR of a Gaussian matrix with sign fix).
pub fn random_orthogonal(dim: usize, rng: &mut Rng) -> DMatrix<f64> {
    let g = DMatrix::from_fn(dim, dim, |_, _| StandardNormal.sample(rng));
    let qr = g.qr();
    let mut q = qr.q();
    let r = qr.r();
    for j in 0..dim {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    q
}

/// Max absolute entry of `q^T q - I`.
pub fn orthonormality_error(q: &DMatrix<f64>) -> f64 {
    let prod = q.transpose() * q;
    let n = prod.nrows();
    (prod - DMatrix::<f64>::identity(n, n)).amax()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeds;

    #[test]
    fn solve_and_guard() {
        let m = DMatrix::from_row_slice(2, 2, &[4.0, 1.0, 1.0, 3.0]);
        let b = DVector::from_vec(vec![1.0, 2.0]);
        let x = spd_solve(&m, &b, "t").unwrap();
        assert!((&m * &x - &b).amax() < 1e-14);

        let sing = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        assert!(matches!(spd_solve(&sing, &b, "t"), Err(Error::Degenerate { .. })));
        let ill = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 1e-13]);
        assert!(matches!(spd_solve(&ill, &b, "t"), Err(Error::Degenerate { .. })));
    }

    #[test]
    fn orthogonal_is_orthonormal() {
        let mut r = seeds::rng(5);
        let q = random_orthogonal(6, &mut r);
        assert!(orthonormality_error(&q) < 1e-10);
    }

    #[test]
    fn norms() {
        let m = DMatrix::from_row_slice(2, 2, &[-3.0, 0.0, 0.0, 2.0]);
        assert_eq!(sym_spectral_norm(&m), 3.0);
        assert!((spectral_norm(&m) - 3.0).abs() < 1e-12);
        assert_eq!(lambda_min(&m), -3.0);
    }
}
