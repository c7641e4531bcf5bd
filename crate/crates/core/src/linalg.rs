use nalgebra::{DMatrix, SymmetricEigen};

use crate::{Error, Result};

/// Solves `a * x = b` for symmetric positive-definite `a`.
pub(crate) fn spd_solve(a: DMatrix<f64>, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = a.nrows();
    let chol = a
        .cholesky()
        .ok_or_else(|| Error::Singular(format!("{n}x{n} system is not positive definite")))?;
    Ok(chol.solve(b))
}

/// `(a + eps I)^(-1/2)` for symmetric positive semi-definite `a`, through the
/// symmetric eigendecomposition.
pub(crate) fn inv_sqrt_sym(a: &DMatrix<f64>, eps: f64) -> Result<DMatrix<f64>> {
    let n = a.nrows();
    let eig = SymmetricEigen::new(a.clone());
    let scale = eig.eigenvalues.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1.0);
    let mut inv_sqrt = Vec::with_capacity(n);
    for &lambda in eig.eigenvalues.iter() {
        let shifted = lambda + eps;
        if shifted <= 1e-12 * scale {
            return Err(Error::Singular(format!(
                "covariance eigenvalue {lambda:e} with epsilon {eps:e}"
            )));
        }
        inv_sqrt.push(1.0 / shifted.sqrt());
    }
    let q = &eig.eigenvectors;
    let mut scaled = q.clone();
    for (j, s) in inv_sqrt.iter().enumerate() {
        scaled.column_mut(j).scale_mut(*s);
    }
    let out = &scaled * q.transpose();
    // exact symmetry; the product is symmetric only up to rounding
    Ok((&out + out.transpose()) * 0.5)
}

pub(crate) fn argmax_first(values: impl IntoIterator<Item = f64>) -> usize {
    let mut best = 0;
    let mut best_val = f64::NEG_INFINITY;
    for (i, v) in values.into_iter().enumerate() {
        if v > best_val {
            best = i;
            best_val = v;
        }
    }
    best
}

pub(crate) fn argmin_first(values: impl IntoIterator<Item = f64>) -> usize {
    let mut best = 0;
    let mut best_val = f64::INFINITY;
    for (i, v) in values.into_iter().enumerate() {
        if v < best_val {
            best = i;
            best_val = v;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn inverse_square_root_of_diagonal() {
        let a = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![4.0, 1.0]));
        let r = inv_sqrt_sym(&a, 0.0).unwrap();
        assert!((r[(0, 0)] - 0.5).abs() < 1e-12);
        assert!((r[(1, 1)] - 1.0).abs() < 1e-12);
        assert!(r[(0, 1)].abs() < 1e-12);
    }

    #[test]
    fn singular_without_epsilon() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        assert!(matches!(inv_sqrt_sym(&a, 0.0), Err(Error::Singular(_))));
        assert!(inv_sqrt_sym(&a, 0.1).is_ok());
    }

    #[test]
    fn ties_resolve_to_lowest_index() {
        assert_eq!(argmax_first([1.0, 3.0, 3.0]), 1);
        assert_eq!(argmin_first([2.0, 0.5, 0.5]), 1);
    }
}
