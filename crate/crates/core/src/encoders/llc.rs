use nalgebra::{DMatrix, DVector, DVectorView};

use crate::{Error, Result};

const RETRIES: usize = 3;

/// Indices of the `k` atoms closest to `x` (ties to the lower index).
pub fn nearest_atoms(atoms: &DMatrix<f64>, x: DVectorView<'_, f64>, k: usize) -> Vec<usize> {
    let mut dist: Vec<(f64, usize)> = atoms
        .column_iter()
        .enumerate()
        .map(|(j, a)| (a.iter().zip(x.iter()).map(|(p, q)| (p - q) * (p - q)).sum(), j))
        .collect();
    dist.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    dist.truncate(k);
    dist.into_iter().map(|(_, j)| j).collect()
}

/// Locality-constrained code: on the `k` nearest atoms `S`, minimize
/// `||x - D_S f||² + delta ||f||²` subject to `sum(f) = 1`.
///
/// Under the constraint `x - D_S f = -(D_S - x 1^T) f`, so the solution is
/// `w / sum(w)` with `(C + delta I) w = 1` and `C` the shifted Gram matrix.
pub fn llc_code(atoms: &DMatrix<f64>, x: DVectorView<'_, f64>, k: usize, delta: f64) -> Result<DVector<f64>> {
    let m = atoms.ncols();
    if k == 0 || k > m {
        return Err(Error::Validation(format!("LLC neighbours {k} outside [1, {m}]")));
    }
    if !(delta > 0.0) {
        return Err(Error::Validation(format!("LLC delta must be positive, got {delta}")));
    }
    let support = nearest_atoms(atoms, x, k);
    let mut shifted = atoms.select_columns(&support);
    for mut col in shifted.column_iter_mut() {
        col -= &x;
    }
    let c = shifted.tr_mul(&shifted);
    let ones = DVector::from_element(k, 1.0);
    let mut reg = delta;
    for _ in 0..=RETRIES {
        let system = &c + DMatrix::identity(k, k) * reg;
        if let Some(chol) = system.cholesky() {
            let w = chol.solve(&ones);
            let total = w.sum();
            if total.is_finite() && total.abs() > 1e-300 {
                let mut code = DVector::zeros(m);
                for (&j, &wj) in support.iter().zip(w.iter()) {
                    code[j] = wj / total;
                }
                return Ok(code);
            }
        }
        reg *= 10.0;
    }
    Err(Error::Singular(format!(
        "LLC system stayed singular up to delta {}",
        reg / 10.0
    )))
}
