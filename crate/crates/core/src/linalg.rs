//! Dense linear-algebra helpers on top of nalgebra.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Relative singular-value cutoff for pseudo-inverses and rank decisions.
pub const RANK_RTOL: f64 = 1e-12;

pub fn singular_values(a: &DMatrix<f64>) -> DVector<f64> {
    a.clone().svd(false, false).singular_values
}

/// Smallest singular value over `min(rows, cols)` values.
pub fn min_singular_value(a: &DMatrix<f64>) -> f64 {
    singular_values(a).iter().cloned().fold(f64::INFINITY, f64::min)
}

/// Numerical rank with relative tolerance [`RANK_RTOL`].
pub fn rank(a: &DMatrix<f64>) -> usize {
    let sv = singular_values(a);
    let max = sv.iter().cloned().fold(0.0, f64::max);
    sv.iter().filter(|&&s| s > RANK_RTOL * max.max(1e-300)).count()
}

/// Least-norm least-squares solution of `A z = b` via the SVD pseudo-inverse.
pub fn least_norm_solve(a: &DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
    let svd = a.clone().svd(true, true);
    let max = svd.singular_values.iter().cloned().fold(0.0, f64::max);
    let eps = RANK_RTOL * max.max(1e-300);
    svd.solve(b, eps).expect("SVD computed with both factors")
}

/// Solve a symmetric positive (semi)definite system, failing when it is
/// numerically singular.
pub fn solve_spd(a: &DMatrix<f64>, b: &DVector<f64>) -> Result<DVector<f64>> {
    let sv = singular_values(a);
    let max = sv.iter().cloned().fold(0.0, f64::max);
    let min = sv.iter().cloned().fold(f64::INFINITY, f64::min);
    if !(max > 0.0) || min <= 1e-13 * max || !min.is_finite() {
        return Err(Error::Solver(format!(
            "normal matrix is singular (condition {:.2e}); use a positive ridge scale",
            max / min
        )));
    }
    if let Some(ch) = a.clone().cholesky() {
        return Ok(ch.solve(b));
    }
    a.clone()
        .lu()
        .solve(b)
        .ok_or_else(|| Error::Solver("normal matrix is singular".into()))
}

/// Inverse of a symmetric positive definite matrix, falling back to the
/// pseudo-inverse when it is rank deficient.
pub fn spd_inverse(a: &DMatrix<f64>) -> DMatrix<f64> {
    if let Some(ch) = a.clone().cholesky() {
        return ch.inverse();
    }
    let svd = a.clone().svd(true, true);
    let max = svd.singular_values.iter().cloned().fold(0.0, f64::max);
    svd.pseudo_inverse(RANK_RTOL * max.max(1e-300))
        .expect("SVD computed with both factors")
}

/// Stack row slices into a matrix.
pub fn from_rows(rows: &[Vec<f64>], cols: usize) -> DMatrix<f64> {
    let mut flat = Vec::with_capacity(rows.len() * cols);
    for r in rows {
        debug_assert_eq!(r.len(), cols);
        flat.extend_from_slice(r);
    }
    DMatrix::from_row_slice(rows.len(), cols, &flat)
}

pub fn inf_norm(v: &DVector<f64>) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn least_norm_underdetermined() {
        // x + y = 2 has least-norm solution (1, 1).
        let a = DMatrix::from_row_slice(1, 2, &[1.0, 1.0]);
        let z = least_norm_solve(&a, &DVector::from_vec(vec![2.0]));
        assert!((z[0] - 1.0).abs() < 1e-12 && (z[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn singular_detected() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        assert!(solve_spd(&a, &DVector::from_vec(vec![1.0, 1.0])).is_err());
        assert_eq!(rank(&a), 1);
    }

    #[test]
    fn spd_solve() {
        let a = DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 3.0]);
        let x = solve_spd(&a, &DVector::from_vec(vec![3.0, 4.0])).unwrap();
        assert!((x[0] - 1.0).abs() < 1e-12 && (x[1] - 1.0).abs() < 1e-12);
    }
}
