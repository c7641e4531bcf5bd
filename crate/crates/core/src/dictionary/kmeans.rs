use nalgebra::DMatrix;
use rand::distr::{weighted::WeightedIndex, Distribution};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::{shuffled_nonzero, Dictionary, DictionaryMethod};
use crate::preprocess::PatchSet;
use crate::{Error, Result};

#[derive(Debug, Clone)]
pub struct KMeansFit {
    /// Raw (unnormalized) cluster centers, one per column.
    pub centroids: DMatrix<f64>,
    pub assignments: Vec<usize>,
    /// Quantization error after initialization and after every Lloyd update.
    pub objective: Vec<f64>,
}

/// Points per block in the nearest-centroid search.
const CHUNK: usize = 1024;

#[inline]
fn column(m: &DMatrix<f64>, j: usize) -> &[f64] {
    let d = m.nrows();
    &m.as_slice()[j * d..(j + 1) * d]
}

#[inline]
fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Nearest centroid and its squared distance for every point. The search uses
/// `||c||² - 2 c^T x` from a matrix product; the returned distance is exact.
fn nearest(data: &DMatrix<f64>, centroids: &DMatrix<f64>) -> Vec<(usize, f64)> {
    let n = data.ncols();
    let cnorm: Vec<f64> = centroids.column_iter().map(|c| c.norm_squared()).collect();
    let starts: Vec<usize> = (0..n).step_by(CHUNK).collect();
    starts
        .par_iter()
        .map(|&s| {
            let w = CHUNK.min(n - s);
            let cross = centroids.tr_mul(&data.columns(s, w));
            (0..w)
                .map(|i| {
                    let mut best = (0, f64::INFINITY);
                    for (j, (cn, cx)) in cnorm.iter().zip(cross.column(i).iter()).enumerate() {
                        let v = cn - 2.0 * cx;
                        if v < best.1 {
                            best = (j, v);
                        }
                    }
                    (best.0, sq_dist(column(data, s + i), column(centroids, best.0)))
                })
                .collect::<Vec<_>>()
        })
        .collect::<Vec<_>>()
        .concat()
}

/// Sum over points of the squared distance to the closest centroid.
pub fn kmeans_objective(data: &DMatrix<f64>, centroids: &DMatrix<f64>) -> f64 {
    nearest(data, centroids).iter().map(|&(_, d)| d).sum()
}

fn plus_plus_init(data: &DMatrix<f64>, m: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let n = data.ncols();
    let mut chosen = Vec::with_capacity(m);
    chosen.push(rng.random_range(0..n));
    let mut min_d: Vec<f64> = (0..n)
        .map(|i| sq_dist(column(data, i), column(data, chosen[0])))
        .collect();
    while chosen.len() < m {
        let next = match WeightedIndex::new(&min_d) {
            Ok(dist) => dist.sample(rng),
            // every remaining point coincides with a chosen center
            Err(_) => {
                let free: Vec<usize> = (0..n).filter(|i| !chosen.contains(i)).collect();
                free[rng.random_range(0..free.len())]
            }
        };
        chosen.push(next);
        let c = column(data, next);
        min_d.par_iter_mut().enumerate().for_each(|(i, d)| {
            *d = d.min(sq_dist(column(data, i), c));
        });
    }
    data.select_columns(&chosen)
}

/// Lloyd iterations from a k-means++ start. Stops early once assignments settle.
pub fn kmeans(patches: &PatchSet, m: usize, iters: usize, seed: u64) -> Result<KMeansFit> {
    let data = &patches.data;
    let n = data.ncols();
    if m == 0 || iters == 0 {
        return Err(Error::Validation("k-means needs m >= 1 and iters >= 1".into()));
    }
    if m > n {
        return Err(Error::InsufficientPatches {
            required: m,
            available: n,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = plus_plus_init(data, m, &mut rng);
    let mut near = nearest(data, &centroids);
    let mut objective = vec![near.iter().map(|&(_, d)| d).sum()];
    let mut assignments: Vec<usize> = Vec::new();

    for _ in 0..iters {
        let fresh: Vec<usize> = near.iter().map(|&(j, _)| j).collect();
        if fresh == assignments {
            break;
        }
        assignments = fresh;

        let mut sums = DMatrix::zeros(data.nrows(), m);
        let mut counts = vec![0usize; m];
        for (i, &j) in assignments.iter().enumerate() {
            sums.column_mut(j).axpy(1.0, &data.column(i), 1.0);
            counts[j] += 1;
        }
        for j in 0..m {
            if counts[j] > 0 {
                centroids.set_column(j, &(sums.column(j) / counts[j] as f64));
            }
        }
        // empty clusters take the point farthest from its own centroid
        for j in 0..m {
            if counts[j] > 0 {
                continue;
            }
            let far = (0..n)
                .filter(|&i| counts[assignments[i]] > 1)
                .map(|i| (i, sq_dist(column(data, i), column(&centroids, assignments[i]))))
                .fold(None::<(usize, f64)>, |best, (i, d)| match best {
                    Some((_, bd)) if bd >= d => best,
                    _ => Some((i, d)),
                });
            if let Some((i, _)) = far {
                counts[assignments[i]] -= 1;
                assignments[i] = j;
                counts[j] = 1;
                centroids.set_column(j, &data.column(i));
            }
        }
        near = nearest(data, &centroids);
        objective.push(near.iter().map(|&(_, d)| d).sum());
    }
    if assignments.is_empty() {
        assignments = near.into_iter().map(|(j, _)| j).collect();
    }
    Ok(KMeansFit {
        centroids,
        assignments,
        objective,
    })
}

/// K-means centers, unit-normalized. A zero center is replaced by an unused patch.
pub fn dict_kmeans(patches: &PatchSet, m: usize, iters: usize, seed: u64) -> Result<Dictionary> {
    let fit = kmeans(patches, m, iters, seed)?;
    let mut atoms = fit.centroids;
    let mut spare = None;
    for j in 0..m {
        let norm = atoms.column(j).norm();
        if norm > 1e-12 {
            atoms.column_mut(j).unscale_mut(norm);
            continue;
        }
        let order = spare.get_or_insert_with(|| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
            shuffled_nonzero(patches, &mut rng).into_iter()
        });
        let i = order.next().ok_or(Error::InsufficientPatches {
            required: m,
            available: 0,
        })?;
        let col = patches.data.column(i);
        atoms.set_column(j, &(col / col.norm()));
    }
    Dictionary::new(atoms, DictionaryMethod::KMeans, seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::StandardNormal;

    fn gaussian(d: usize, n: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DMatrix::from_fn(d, n, |_, _| rng.sample::<f64, _>(StandardNormal))
    }

    #[test]
    fn separated_clouds_recover_means() {
        let mut data = gaussian(3, 200, 4) * 0.1;
        for i in 0..100 {
            data[(0, i)] += 10.0;
        }
        for i in 100..200 {
            data[(1, i)] -= 10.0;
        }
        let fit = kmeans(&PatchSet::from_columns(data.clone()), 2, 20, 1).unwrap();
        let mean_a = data.columns(0, 100).column_mean();
        let mean_b = data.columns(100, 100).column_mean();
        let c0 = fit.centroids.column(0).into_owned();
        let c1 = fit.centroids.column(1).into_owned();
        let (first, second) = if (&c0 - &mean_a).norm() < (&c1 - &mean_a).norm() {
            (c0, c1)
        } else {
            (c1, c0)
        };
        assert!((first - mean_a).abs().max() < 1e-6);
        assert!((second - mean_b).abs().max() < 1e-6);
    }

    #[test]
    fn m_equals_n_reaches_zero() {
        let data = gaussian(4, 25, 9);
        let fit = kmeans(&PatchSet::from_columns(data.clone()), 25, 5, 3).unwrap();
        assert!(*fit.objective.last().unwrap() < 1e-20);
        for c in fit.centroids.column_iter() {
            assert!(data.column_iter().any(|x| (x - c).abs().max() == 0.0));
        }
    }

    #[test]
    fn objective_never_increases() {
        for seed in 0..4 {
            let data = gaussian(6, 600, 20 + seed);
            let fit = kmeans(&PatchSet::from_columns(data.clone()), 24, 30, seed).unwrap();
            for w in fit.objective.windows(2) {
                assert!(w[1] <= w[0] + 1e-10, "{} -> {}", w[0], w[1]);
            }
            // recompute the final value independently
            let direct: f64 = data
                .column_iter()
                .map(|x| {
                    fit.centroids
                        .column_iter()
                        .map(|c| (x - c).norm_squared())
                        .fold(f64::INFINITY, f64::min)
                })
                .sum();
            assert!((direct - fit.objective.last().unwrap()).abs() < 1e-9 * direct.max(1.0));
        }
    }

    #[test]
    fn duplicates_do_not_break_init() {
        let data = DMatrix::from_fn(2, 10, |r, c| if c < 8 { 1.0 } else { r as f64 + 2.0 });
        let fit = kmeans(&PatchSet::from_columns(data), 4, 10, 0).unwrap();
        assert!(fit.centroids.iter().all(|v| v.is_finite()));
    }
}
