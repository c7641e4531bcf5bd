//! Dictionary builders: random patches, K-means, K-SVD and sparse coding.
//!
//! Every builder returns atoms normalized to unit L2 norm so inner-product
//! encoders behave the same whichever builder produced the dictionary.

mod kmeans;
mod ksvd;
mod sparse;

use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::preprocess::{hex, PatchSet};
use crate::{Error, Result};

pub use kmeans::{dict_kmeans, kmeans, kmeans_objective, KMeansFit};
pub use ksvd::{dict_ksvd, ksvd, ksvd_from, omp, KsvdFit};
pub use sparse::{dict_sc, sparse_coding, sparse_coding_from, sparse_coding_objective, SparseCodingFit};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DictionaryMethod {
    Random,
    KMeans,
    Ksvd,
    SparseCoding,
}

impl DictionaryMethod {
    pub const ALL: [DictionaryMethod; 4] = [
        DictionaryMethod::Random,
        DictionaryMethod::KMeans,
        DictionaryMethod::Ksvd,
        DictionaryMethod::SparseCoding,
    ];

    pub fn name(self) -> &'static str {
        match self {
            DictionaryMethod::Random => "random",
            DictionaryMethod::KMeans => "kmeans",
            DictionaryMethod::Ksvd => "ksvd",
            DictionaryMethod::SparseCoding => "sc",
        }
    }
}

impl fmt::Display for DictionaryMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DictionaryMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "random" => Ok(Self::Random),
            "kmeans" | "k-means" => Ok(Self::KMeans),
            "ksvd" | "k-svd" => Ok(Self::Ksvd),
            "sc" | "sparse" | "sparse-coding" => Ok(Self::SparseCoding),
            other => Err(Error::Config(format!("unknown dictionary method {other:?}"))),
        }
    }
}

/// `d x m` matrix of unit-norm atoms with the metadata needed to rebuild it.
#[derive(Debug, Clone, PartialEq)]
pub struct Dictionary {
    atoms: DMatrix<f64>,
    pub method: DictionaryMethod,
    pub seed: u64,
    /// Fingerprint of the whitening model the training patches went through.
    pub whitening_id: Option<String>,
}

impl Dictionary {
    /// Validates unit-norm, finite columns.
    pub fn new(atoms: DMatrix<f64>, method: DictionaryMethod, seed: u64) -> Result<Self> {
        if atoms.ncols() == 0 || atoms.nrows() == 0 {
            return Err(Error::Dimension("dictionary needs at least one atom".into()));
        }
        if atoms.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation("dictionary has non-finite entries".into()));
        }
        for (j, col) in atoms.column_iter().enumerate() {
            let n = col.norm();
            if (n - 1.0).abs() > 1e-8 {
                return Err(Error::Validation(format!("atom {j} has norm {n}")));
            }
        }
        Ok(Self {
            atoms,
            method,
            seed,
            whitening_id: None,
        })
    }

    /// Normalizes every column first. Zero columns are an error.
    pub fn from_unnormalized(mut atoms: DMatrix<f64>, method: DictionaryMethod, seed: u64) -> Result<Self> {
        for (j, mut col) in atoms.column_iter_mut().enumerate() {
            let n = col.norm();
            if n <= f64::EPSILON {
                return Err(Error::Validation(format!("atom {j} has zero norm")));
            }
            col /= n;
        }
        Self::new(atoms, method, seed)
    }

    pub fn with_whitening_id(mut self, id: impl Into<String>) -> Self {
        self.whitening_id = Some(id.into());
        self
    }

    pub fn atoms(&self) -> &DMatrix<f64> {
        &self.atoms
    }

    pub fn dim(&self) -> usize {
        self.atoms.nrows()
    }

    pub fn size(&self) -> usize {
        self.atoms.ncols()
    }

    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.method.name().as_bytes());
        h.update(self.seed.to_le_bytes());
        h.update((self.atoms.nrows() as u64).to_le_bytes());
        for v in self.atoms.iter() {
            h.update(v.to_le_bytes());
        }
        hex(&h.finalize()[..8])
    }
}

/// Usable column indices in a seeded random order (zero-norm columns skipped).
pub(crate) fn shuffled_nonzero(patches: &PatchSet, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut order: Vec<usize> = (0..patches.len()).collect();
    order.shuffle(rng);
    order.retain(|&i| patches.data.column(i).norm() > 1e-12);
    order
}

pub(crate) fn normalized_columns(patches: &PatchSet, indices: &[usize]) -> DMatrix<f64> {
    let mut atoms = patches.data.select_columns(indices);
    for mut col in atoms.column_iter_mut() {
        let n = col.norm();
        col /= n;
    }
    atoms
}

/// `m` distinct patches drawn without replacement, then unit-normalized.
pub fn dict_random(patches: &PatchSet, m: usize, seed: u64) -> Result<Dictionary> {
    if m == 0 {
        return Err(Error::Validation("dictionary size must be at least 1".into()));
    }
    if m > patches.len() {
        return Err(Error::InsufficientPatches {
            required: m,
            available: patches.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let order = shuffled_nonzero(patches, &mut rng);
    if order.len() < m {
        return Err(Error::InsufficientPatches {
            required: m,
            available: order.len(),
        });
    }
    Dictionary::new(normalized_columns(patches, &order[..m]), DictionaryMethod::Random, seed)
}

/// Builder parameters for [`build_dictionary`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DictionaryParams {
    pub method: DictionaryMethod,
    pub size: usize,
    pub iters: usize,
    /// K-SVD sparsity level.
    pub sparsity: usize,
    /// Sparse-coding penalty.
    pub lambda: f64,
    pub seed: u64,
}

impl Default for DictionaryParams {
    fn default() -> Self {
        Self {
            method: DictionaryMethod::Random,
            size: 1600,
            iters: 30,
            sparsity: 5,
            lambda: 1.0,
            seed: 0,
        }
    }
}

pub fn build_dictionary(patches: &PatchSet, params: &DictionaryParams) -> Result<Dictionary> {
    let DictionaryParams {
        method,
        size,
        iters,
        sparsity,
        lambda,
        seed,
    } = *params;
    match method {
        DictionaryMethod::Random => dict_random(patches, size, seed),
        DictionaryMethod::KMeans => dict_kmeans(patches, size, iters, seed),
        DictionaryMethod::Ksvd => dict_ksvd(patches, size, sparsity, iters, seed),
        DictionaryMethod::SparseCoding => dict_sc(patches, size, lambda, iters, seed),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_patches(d: usize, n: usize, seed: u64) -> PatchSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        PatchSet::from_columns(DMatrix::from_fn(d, n, |_, _| rng.random::<f64>() - 0.5))
    }

    #[test]
    fn random_exhaustion_is_a_permutation() {
        let p = random_patches(5, 12, 1);
        let dict = dict_random(&p, 12, 9).unwrap();
        let mut matched = vec![false; 12];
        for atom in dict.atoms().column_iter() {
            let hit = (0..12)
                .find(|&i| {
                    let c = p.data.column(i);
                    !matched[i] && (c / c.norm() - atom).abs().max() < 1e-12
                })
                .expect("every atom is a normalized patch");
            matched[hit] = true;
        }
        assert!(matched.iter().all(|&m| m));
    }

    #[test]
    fn random_is_seeded_and_sized() {
        let p = random_patches(36, 50_000, 2);
        let a = dict_random(&p, 1600, 5).unwrap();
        let b = dict_random(&p, 1600, 5).unwrap();
        assert_eq!(a, b);
        assert_eq!((a.dim(), a.size()), (36, 1600));
        assert_ne!(a, dict_random(&p, 1600, 6).unwrap());
    }

    #[test]
    fn random_skips_zero_patches() {
        let mut data = DMatrix::zeros(4, 6);
        data[(0, 2)] = 1.0;
        data[(1, 4)] = -2.0;
        let p = PatchSet::from_columns(data);
        let dict = dict_random(&p, 2, 0).unwrap();
        assert_eq!(dict.size(), 2);
        assert!(matches!(
            dict_random(&p, 3, 0),
            Err(Error::InsufficientPatches { available: 2, .. })
        ));
        assert!(matches!(
            dict_random(&p, 7, 0),
            Err(Error::InsufficientPatches { .. })
        ));
    }

    #[test]
    fn all_builders_unit_norm_and_deterministic() {
        for seed in 0..3 {
            let p = random_patches(9, 300, 10 + seed);
            for method in DictionaryMethod::ALL {
                let params = DictionaryParams {
                    method,
                    size: 16,
                    iters: 4,
                    sparsity: 3,
                    lambda: 0.2,
                    seed,
                };
                let a = build_dictionary(&p, &params).unwrap();
                let b = build_dictionary(&p, &params).unwrap();
                assert_eq!(a, b, "{method}");
                assert_eq!(a.method, method);
                for col in a.atoms().column_iter() {
                    assert!((col.norm() - 1.0).abs() < 1e-8);
                }
            }
        }
    }

    #[test]
    fn method_names_parse() {
        for m in DictionaryMethod::ALL {
            assert_eq!(m.name().parse::<DictionaryMethod>().unwrap(), m);
        }
        assert!("pca".parse::<DictionaryMethod>().is_err());
    }
}
