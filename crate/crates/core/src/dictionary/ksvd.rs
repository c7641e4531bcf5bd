use nalgebra::{DMatrix, DVector, DVectorView};
use rayon::prelude::*;

use super::{dict_random, Dictionary, DictionaryMethod};
use crate::preprocess::PatchSet;
use crate::{Error, Result};

const POWER_STEPS: usize = 8;

/// Sparse code as `(atom, coefficient)` pairs.
type SparseCode = Vec<(usize, f64)>;

#[derive(Debug, Clone)]
pub struct KsvdFit {
    pub atoms: DMatrix<f64>,
    pub codes: Vec<Vec<(usize, f64)>>,
    /// `||X - D F||_F²` after each outer iteration.
    pub objective: Vec<f64>,
}

/// Orthogonal matching pursuit with at most `t` atoms, using a precomputed Gram matrix.
fn omp_gram(atoms: &DMatrix<f64>, gram: &DMatrix<f64>, x: DVectorView<'_, f64>, t: usize) -> SparseCode {
    let alpha0 = atoms.tr_mul(&x);
    let mut alpha = alpha0.clone();
    let mut support: Vec<usize> = Vec::with_capacity(t);
    let mut coef = DVector::zeros(0);
    for _ in 0..t {
        let mut best = None;
        let mut best_val = 1e-12;
        for (j, a) in alpha.iter().enumerate() {
            if a.abs() > best_val && !support.contains(&j) {
                best = Some(j);
                best_val = a.abs();
            }
        }
        let Some(j) = best else { break };
        support.push(j);
        let sub = DMatrix::from_fn(support.len(), support.len(), |r, c| gram[(support[r], support[c])]);
        let rhs = DVector::from_iterator(support.len(), support.iter().map(|&s| alpha0[s]));
        match sub.cholesky() {
            Some(chol) => coef = chol.solve(&rhs),
            None => {
                // selected atom is linearly dependent on the support
                support.pop();
                break;
            }
        }
        alpha.copy_from(&alpha0);
        for (&s, &c) in support.iter().zip(coef.iter()) {
            alpha.axpy(-c, &gram.column(s), 1.0);
        }
    }
    support.into_iter().zip(coef.iter().copied()).collect()
}

/// Dense OMP code of `x` with at most `t` nonzeros.
pub fn omp(dict: &Dictionary, x: &DVector<f64>, t: usize) -> DVector<f64> {
    let atoms = dict.atoms();
    let gram = atoms.tr_mul(atoms);
    let mut out = DVector::zeros(atoms.ncols());
    for (j, c) in omp_gram(atoms, &gram, x.as_view(), t) {
        out[j] = c;
    }
    out
}

fn residual(atoms: &DMatrix<f64>, x: DVectorView<'_, f64>, code: &SparseCode) -> DVector<f64> {
    let mut r = x.into_owned();
    for &(j, c) in code {
        r.axpy(-c, &atoms.column(j), 1.0);
    }
    r
}

fn residuals(atoms: &DMatrix<f64>, data: &DMatrix<f64>, codes: &[SparseCode]) -> DMatrix<f64> {
    let cols: Vec<DVector<f64>> = codes
        .par_iter()
        .enumerate()
        .map(|(i, code)| residual(atoms, data.column(i), code))
        .collect();
    DMatrix::from_columns(&cols)
}

/// K-SVD from random-patch initialization.
pub fn ksvd(patches: &PatchSet, m: usize, sparsity: usize, iters: usize, seed: u64) -> Result<KsvdFit> {
    let init = dict_random(patches, m, seed)?;
    ksvd_from(patches, init.atoms().clone(), sparsity, iters)
}

/// K-SVD from the given unit-norm atoms.
///
/// The coding step keeps a patch's previous code when it reconstructs better
/// than the fresh OMP code, so the objective sequence is non-increasing.
pub fn ksvd_from(patches: &PatchSet, init: DMatrix<f64>, sparsity: usize, iters: usize) -> Result<KsvdFit> {
    let data = &patches.data;
    let (d, m) = init.shape();
    if d != patches.dim() {
        return Err(Error::Dimension(format!("atoms have dimension {d}, patches {}", patches.dim())));
    }
    if sparsity == 0 || sparsity > d.min(m) {
        return Err(Error::Validation(format!("sparsity {sparsity} outside [1, {}]", d.min(m))));
    }
    if iters == 0 {
        return Err(Error::Validation("K-SVD needs at least one iteration".into()));
    }
    let n = data.ncols();
    let mut atoms = init;
    let mut codes: Vec<SparseCode> = vec![Vec::new(); n];
    let mut objective = Vec::with_capacity(iters);
    let mut first = true;

    for _ in 0..iters {
        let gram = atoms.tr_mul(&atoms);
        let previous = std::mem::take(&mut codes);
        codes = previous
            .into_par_iter()
            .enumerate()
            .map(|(i, old)| {
                let x = data.column(i);
                let fresh = omp_gram(&atoms, &gram, x, sparsity);
                if first {
                    return fresh;
                }
                let fresh_err = residual(&atoms, x, &fresh).norm_squared();
                let old_err = residual(&atoms, x, &old).norm_squared();
                if old_err < fresh_err {
                    old
                } else {
                    fresh
                }
            })
            .collect();
        first = false;

        let mut resid = residuals(&atoms, data, &codes);
        // usage[k] = (patch, slot in that patch's code)
        let mut usage: Vec<Vec<(usize, usize)>> = vec![Vec::new(); m];
        for (i, code) in codes.iter().enumerate() {
            for (slot, &(k, _)) in code.iter().enumerate() {
                usage[k].push((i, slot));
            }
        }
        let mut taken = vec![false; n];
        for k in 0..m {
            let users = &usage[k];
            if users.is_empty() {
                // unused atom: restart it at the worst-reconstructed patch
                let worst = (0..n)
                    .filter(|&i| !taken[i] && data.column(i).norm() > 1e-12)
                    .map(|i| (i, resid.column(i).norm_squared()))
                    .fold(None::<(usize, f64)>, |best, (i, e)| match best {
                        Some((_, be)) if be >= e => best,
                        _ => Some((i, e)),
                    });
                if let Some((i, _)) = worst {
                    taken[i] = true;
                    let x = data.column(i);
                    atoms.set_column(k, &(x / x.norm()));
                }
                continue;
            }
            let old_atom = atoms.column(k).into_owned();
            let mut err = DMatrix::zeros(d, users.len());
            for (c, &(i, slot)) in users.iter().enumerate() {
                let mut col = err.column_mut(c);
                col.copy_from(&resid.column(i));
                col.axpy(codes[i][slot].1, &old_atom, 1.0);
            }
            let base = err.tr_mul(&old_atom);
            let mut u = old_atom.clone();
            for _ in 0..POWER_STEPS {
                let next = &err * err.tr_mul(&u);
                let norm = next.norm();
                if norm <= 1e-300 {
                    break;
                }
                u = next / norm;
            }
            let mut coeffs = err.tr_mul(&u);
            if coeffs.norm_squared() < base.norm_squared() {
                u = old_atom;
                coeffs = base;
            }
            for (c, &(i, slot)) in users.iter().enumerate() {
                codes[i][slot].1 = coeffs[c];
                let mut r = resid.column_mut(i);
                r.copy_from(&err.column(c));
                r.axpy(-coeffs[c], &u, 1.0);
            }
            atoms.set_column(k, &u);
        }
        let fresh = residuals(&atoms, data, &codes);
        objective.push(fresh.norm_squared());
    }
    Ok(KsvdFit {
        atoms,
        codes,
        objective,
    })
}

pub fn dict_ksvd(patches: &PatchSet, m: usize, sparsity: usize, iters: usize, seed: u64) -> Result<Dictionary> {
    let fit = ksvd(patches, m, sparsity, iters, seed)?;
    Dictionary::from_unnormalized(fit.atoms, DictionaryMethod::Ksvd, seed)
}
