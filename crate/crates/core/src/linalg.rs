//! Small dense linear-algebra helpers on top of nalgebra.

use crate::error::{Error, Result};
use nalgebra::{DMatrix, DVector};

/// Minimum-norm solution of `a x = b` for symmetric `a`, discarding eigenvalues
/// below `rel_cutoff * max |eigenvalue|`.
pub fn pinv_solve(a: &DMatrix<f64>, b: &DVector<f64>, rel_cutoff: f64) -> Result<DVector<f64>> {
    if a.nrows() != a.ncols() || a.nrows() != b.len() {
        return Err(Error::DimensionMismatch { expected: a.nrows(), got: b.len() });
    }
    let sym = symmetrize(a);
    let eig = sym.symmetric_eigen();
    let top = eig.eigenvalues.amax();
    let mut x = DVector::zeros(b.len());
    if top == 0.0 {
        return Ok(x);
    }
    for (k, &lam) in eig.eigenvalues.iter().enumerate() {
        if lam.abs() > rel_cutoff * top {
            let v = eig.eigenvectors.column(k);
            x += v * (v.dot(b) / lam);
        }
    }
    Ok(x)
}

pub fn symmetrize(a: &DMatrix<f64>) -> DMatrix<f64> {
    (a + a.transpose()) * 0.5
}

/// Number of eigenvalues of symmetric `a` above `rel_tol * max |eigenvalue|`.
pub fn numerical_rank(a: &DMatrix<f64>, rel_tol: f64) -> usize {
    let eig = symmetrize(a).symmetric_eigen();
    let top = eig.eigenvalues.amax();
    if top == 0.0 {
        return 0;
    }
    eig.eigenvalues.iter().filter(|&&l| l > rel_tol * top).count()
}

/// Eigenvalues of symmetric `a` in nonincreasing order.
pub fn sorted_eigenvalues(a: &DMatrix<f64>) -> Vec<f64> {
    let mut ev: Vec<f64> = symmetrize(a).symmetric_eigenvalues().iter().copied().collect();
    ev.sort_by(|x, y| y.total_cmp(x));
    ev
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pinv_gives_minimum_norm_solution() {
        // rank one: a = u u^T
        let u = DVector::from_vec(vec![1.0, 2.0, 2.0]);
        let a = &u * u.transpose();
        let b = &u * 3.0;
        let x = pinv_solve(&a, &b, 1e-10).unwrap();
        // minimum-norm solution is parallel to u with u.x = 3 / ... : a x = b -> u (u.x) = 3u -> u.x = 3
        assert!((u.dot(&x) - 3.0).abs() < 1e-12);
        let parallel = &u * (u.dot(&x) / u.dot(&u));
        assert!((&x - parallel).norm() < 1e-12);
        assert_eq!(numerical_rank(&a, 1e-10), 1);
    }

    #[test]
    fn pinv_matches_inverse_for_spd() {
        let a = DMatrix::from_row_slice(2, 2, &[4.0, 1.0, 1.0, 3.0]);
        let b = DVector::from_vec(vec![1.0, 2.0]);
        let x = pinv_solve(&a, &b, 1e-10).unwrap();
        assert!((&a * &x - &b).norm() < 1e-12);
        assert_eq!(sorted_eigenvalues(&a).len(), 2);
    }
}
