use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::{dict_random, Dictionary, DictionaryMethod};
use crate::encoders::LassoSolver;
use crate::preprocess::PatchSet;
use crate::{Error, Result};

#[derive(Debug, Clone)]
pub struct SparseCodingFit {
    pub atoms: DMatrix<f64>,
    /// `m x N` codes from the last coding step.
    pub codes: DMatrix<f64>,
    /// `sum_i ||D f_i - x_i||² + lambda ||f_i||_1` after each outer iteration.
    pub objective: Vec<f64>,
}

pub fn sparse_coding_objective(atoms: &DMatrix<f64>, data: &DMatrix<f64>, codes: &DMatrix<f64>, lambda: f64) -> f64 {
    let recon = atoms * codes - data;
    recon.norm_squared() + lambda * codes.iter().map(|v| v.abs()).sum::<f64>()
}

pub fn sparse_coding(patches: &PatchSet, m: usize, lambda: f64, iters: usize, seed: u64) -> Result<SparseCodingFit> {
    let init = dict_random(patches, m, seed)?;
    sparse_coding_from(patches, init.atoms().clone(), lambda, iters, seed)
}

/// Alternates warm-started LASSO coding with one pass of atom-wise block
/// coordinate descent projected onto the unit sphere.
pub fn sparse_coding_from(
    patches: &PatchSet,
    init: DMatrix<f64>,
    lambda: f64,
    iters: usize,
    seed: u64,
) -> Result<SparseCodingFit> {
    if !(lambda > 0.0) {
        return Err(Error::Validation(format!("lambda must be positive, got {lambda}")));
    }
    if iters == 0 {
        return Err(Error::Validation("sparse coding needs at least one iteration".into()));
    }
    let data = &patches.data;
    if init.nrows() != data.nrows() {
        return Err(Error::Dimension("initial atoms do not match patch dimension".into()));
    }
    let (n, m) = (data.ncols(), init.ncols());
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(0x5c));
    let mut atoms = init;
    let mut codes = DMatrix::<f64>::zeros(m, n);
    let mut objective = Vec::with_capacity(iters);

    for _ in 0..iters {
        let solver = LassoSolver::new(&atoms, lambda)?;
        let dtx = atoms.tr_mul(data);
        let cols: Vec<DVector<f64>> = (0..n)
            .into_par_iter()
            .map(|i| {
                let warm = codes.column(i).into_owned();
                solver.solve_projected(dtx.column(i).into_owned(), Some(warm)).code
            })
            .collect();
        for (i, c) in cols.into_iter().enumerate() {
            codes.set_column(i, &c);
        }

        let xf = data * codes.transpose();
        let ff = &codes * codes.transpose();
        for j in 0..m {
            if ff[(j, j)] == 0.0 {
                let i = rng.random_range(0..n);
                let x = data.column(i);
                let norm = x.norm();
                if norm > 1e-12 {
                    atoms.set_column(j, &(x / norm));
                }
                continue;
            }
            let mut v = xf.column(j) - &atoms * ff.column(j);
            v.axpy(ff[(j, j)], &atoms.column(j), 1.0);
            let norm = v.norm();
            if norm > 1e-300 {
                atoms.set_column(j, &(v / norm));
            }
        }
        objective.push(sparse_coding_objective(&atoms, data, &codes, lambda));
    }
    Ok(SparseCodingFit {
        atoms,
        codes,
        objective,
    })
}

pub fn dict_sc(patches: &PatchSet, m: usize, lambda: f64, iters: usize, seed: u64) -> Result<Dictionary> {
    let fit = sparse_coding(patches, m, lambda, iters, seed)?;
    Dictionary::from_unnormalized(fit.atoms, DictionaryMethod::SparseCoding, seed)
}
