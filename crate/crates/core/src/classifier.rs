//! Closed-form ridge regression classifier and the residual-based
//! (collaborative representation) baselines used for modular comparisons.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::linalg::{argmax_first, argmin_first, spd_solve};
use crate::{Error, Result};

pub const DEFAULT_DELTA: f64 = 0.005;

/// `n x c` one-hot label matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelMatrix {
    y: DMatrix<f64>,
}

impl LabelMatrix {
    pub fn from_labels(labels: &[usize], classes: usize) -> Result<Self> {
        if let Some(l) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Validation(format!("label {l} outside [0, {classes})")));
        }
        let mut y = DMatrix::zeros(labels.len(), classes);
        for (i, &l) in labels.iter().enumerate() {
            y[(i, l)] = 1.0;
        }
        Ok(Self { y })
    }

    pub fn from_matrix(y: DMatrix<f64>) -> Result<Self> {
        for (i, row) in y.row_iter().enumerate() {
            let ones = row.iter().filter(|&&v| v == 1.0).count();
            let zeros = row.iter().filter(|&&v| v == 0.0).count();
            if ones != 1 || ones + zeros != row.len() {
                return Err(Error::Validation(format!("label row {i} is not one-hot")));
            }
        }
        Ok(Self { y })
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.y
    }

    pub fn classes(&self) -> usize {
        self.y.ncols()
    }
}

/// Per-dimension zero-mean, unit-variance scaling fitted on training rows.
#[derive(Debug, Clone, PartialEq)]
pub struct Standardizer {
    pub mean: DVector<f64>,
    pub std: DVector<f64>,
}

impl Standardizer {
    pub fn fit(x: &DMatrix<f64>) -> Self {
        let n = x.nrows() as f64;
        let mean = x.row_mean().transpose();
        let std = DVector::from_iterator(
            x.ncols(),
            x.column_iter().zip(mean.iter()).map(|(col, m)| {
                let var = col.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n;
                // constant dimensions are left unscaled
                if var > 1e-24 {
                    var.sqrt()
                } else {
                    1.0
                }
            }),
        );
        Self { mean, std }
    }

    pub fn apply_rows(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = x.clone();
        for (j, mut col) in out.column_iter_mut().enumerate() {
            let (m, s) = (self.mean[j], self.std[j]);
            col.apply(|v| *v = (*v - m) / s);
        }
        out
    }

    pub fn apply(&self, z: &[f64]) -> Vec<f64> {
        z.iter()
            .enumerate()
            .map(|(j, v)| (v - self.mean[j]) / self.std[j])
            .collect()
    }
}

/// `W = (X^T X + delta I)^(-1) X^T Y`.
pub fn ridge_primal(x: &DMatrix<f64>, y: &DMatrix<f64>, delta: f64) -> Result<DMatrix<f64>> {
    let d = x.ncols();
    let system = x.tr_mul(x) + DMatrix::identity(d, d) * delta;
    spd_solve(system, &x.tr_mul(y))
}

/// `W = X^T (X X^T + delta I)^(-1) Y`; only an `n x n` system is factored.
pub fn ridge_dual(x: &DMatrix<f64>, y: &DMatrix<f64>, delta: f64) -> Result<DMatrix<f64>> {
    let n = x.nrows();
    let system = x * x.transpose() + DMatrix::identity(n, n) * delta;
    Ok(x.tr_mul(&spd_solve(system, y)?))
}

#[derive(Debug, Clone, PartialEq)]
pub struct RidgeClassifier {
    /// `D x c` weights.
    pub weights: DMatrix<f64>,
    pub delta: f64,
    pub standardizer: Option<Standardizer>,
}

/// Fits on the rows of `x` (`n x D`). The dual form is used when `D > n`.
pub fn fit_ridge(x: &DMatrix<f64>, labels: &LabelMatrix, delta: f64, standardize: bool) -> Result<RidgeClassifier> {
    if !(delta > 0.0) {
        return Err(Error::Validation(format!("ridge delta must be positive, got {delta}")));
    }
    if x.nrows() == 0 || x.nrows() != labels.matrix().nrows() {
        return Err(Error::Dimension(format!(
            "{} feature rows vs {} label rows",
            x.nrows(),
            labels.matrix().nrows()
        )));
    }
    if labels.classes() < 2 {
        return Err(Error::Validation("need at least two classes".into()));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::Validation("non-finite feature values".into()));
    }
    let standardizer = standardize.then(|| Standardizer::fit(x));
    let scaled;
    let xs = match &standardizer {
        Some(s) => {
            scaled = s.apply_rows(x);
            &scaled
        }
        None => x,
    };
    let weights = if xs.ncols() > xs.nrows() {
        ridge_dual(xs, labels.matrix(), delta)?
    } else {
        ridge_primal(xs, labels.matrix(), delta)?
    };
    Ok(RidgeClassifier {
        weights,
        delta,
        standardizer,
    })
}

/// Column-block width for [`fit_ridge_rows`].
const ROW_BLOCK: usize = 2048;

/// [`fit_ridge`] over single-precision feature rows without materializing a
/// dense double-precision copy. Accumulation is in `f64`; when `D > n` the dual
/// system is assembled one column block at a time.
pub fn fit_ridge_rows(rows: &[Vec<f32>], labels: &LabelMatrix, delta: f64, standardize: bool) -> Result<RidgeClassifier> {
    let n = rows.len();
    let d = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != d) {
        return Err(Error::Dimension("feature rows differ in length".into()));
    }
    if d <= n || n == 0 {
        let x = DMatrix::from_fn(n, d, |i, j| rows[i][j] as f64);
        return fit_ridge(&x, labels, delta, standardize);
    }
    if !(delta > 0.0) {
        return Err(Error::Validation(format!("ridge delta must be positive, got {delta}")));
    }
    if n != labels.matrix().nrows() {
        return Err(Error::Dimension(format!("{n} feature rows vs {} label rows", labels.matrix().nrows())));
    }
    if labels.classes() < 2 {
        return Err(Error::Validation("need at least two classes".into()));
    }
    if rows.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::Validation("non-finite feature values".into()));
    }
    let standardizer = standardize.then(|| {
        let mut mean = DVector::zeros(d);
        for r in rows {
            mean.iter_mut().zip(r).for_each(|(m, &v)| *m += v as f64);
        }
        mean /= n as f64;
        let mut var = DVector::<f64>::zeros(d);
        for r in rows {
            var.iter_mut()
                .zip(r)
                .zip(mean.iter())
                .for_each(|((s, &v), m)| *s += (v as f64 - m) * (v as f64 - m));
        }
        let std = var.map(|s| {
            let s = s / n as f64;
            if s > 1e-24 {
                s.sqrt()
            } else {
                1.0
            }
        });
        Standardizer { mean, std }
    });
    let block = |start: usize| -> DMatrix<f64> {
        let width = ROW_BLOCK.min(d - start);
        DMatrix::from_fn(n, width, |i, j| {
            let v = rows[i][start + j] as f64;
            match &standardizer {
                Some(s) => (v - s.mean[start + j]) / s.std[start + j],
                None => v,
            }
        })
    };
    let starts: Vec<usize> = (0..d).step_by(ROW_BLOCK).collect();
    let mut gram = DMatrix::<f64>::identity(n, n) * delta;
    // partial Gram matrices are summed in block order so the result is reproducible
    for group in starts.chunks(rayon::current_num_threads().max(1)) {
        let parts: Vec<DMatrix<f64>> = group
            .par_iter()
            .map(|&s| {
                let b = block(s);
                &b * b.transpose()
            })
            .collect();
        for p in parts {
            gram += p;
        }
    }
    let alpha = spd_solve((&gram + gram.transpose()) * 0.5, labels.matrix())?;
    let mut weights = DMatrix::zeros(d, labels.classes());
    let blocks: Vec<(usize, DMatrix<f64>)> = starts.par_iter().map(|&s| (s, block(s).tr_mul(&alpha))).collect();
    for (s, w) in blocks {
        weights.rows_mut(s, w.nrows()).copy_from(&w);
    }
    Ok(RidgeClassifier {
        weights,
        delta,
        standardizer,
    })
}

impl RidgeClassifier {
    pub fn dim(&self) -> usize {
        self.weights.nrows()
    }

    pub fn classes(&self) -> usize {
        self.weights.ncols()
    }

    /// `W^T z` after standardization.
    pub fn scores(&self, z: &[f64]) -> Result<Vec<f64>> {
        if z.len() != self.dim() {
            return Err(Error::Dimension(format!("feature length {} vs model {}", z.len(), self.dim())));
        }
        let z = match &self.standardizer {
            Some(s) => s.apply(z),
            None => z.to_vec(),
        };
        Ok(self
            .weights
            .column_iter()
            .map(|w| w.iter().zip(&z).map(|(a, b)| a * b).sum())
            .collect())
    }

    /// Highest-scoring class, lowest index on ties.
    pub fn predict(&self, z: &[f64]) -> Result<usize> {
        Ok(argmax_first(self.scores(z)?))
    }
}

/// Collaborative-representation residual classifier over training columns.
#[derive(Debug, Clone)]
pub struct ResidualModel {
    /// `D x n`; columns are training samples.
    samples: DMatrix<f64>,
    labels: Vec<usize>,
    classes: usize,
    /// `(A^T A + gamma I)^(-1) A^T`
    projection: DMatrix<f64>,
    pub gamma: f64,
}

/// `train_x` holds samples as rows (`n x D`).
pub fn fit_residual_crc(train_x: &DMatrix<f64>, labels: &[usize], gamma: f64) -> Result<ResidualModel> {
    if !(gamma > 0.0) {
        return Err(Error::Validation(format!("crc gamma must be positive, got {gamma}")));
    }
    if train_x.nrows() != labels.len() || labels.is_empty() {
        return Err(Error::Dimension("training rows and labels differ".into()));
    }
    let samples = train_x.transpose();
    let n = samples.ncols();
    let system = samples.tr_mul(&samples) + DMatrix::identity(n, n) * gamma;
    let projection = spd_solve(system, &train_x.clone_owned())?;
    let classes = labels.iter().max().unwrap() + 1;
    Ok(ResidualModel {
        samples,
        labels: labels.to_vec(),
        classes,
        projection,
        gamma,
    })
}

impl ResidualModel {
    pub fn classes(&self) -> usize {
        self.classes
    }

    /// Collaborative code of `z` over all training samples.
    pub fn code(&self, z: &[f64]) -> Result<DVector<f64>> {
        if z.len() != self.samples.nrows() {
            return Err(Error::Dimension(format!(
                "probe length {} vs training dimension {}",
                z.len(),
                self.samples.nrows()
            )));
        }
        Ok(&self.projection * DVector::from_column_slice(z))
    }

    /// `||z - A_c f_c||²` for every class `c`.
    pub fn residuals(&self, z: &[f64]) -> Result<Vec<f64>> {
        let f = self.code(z)?;
        let mut recon = vec![DVector::<f64>::zeros(z.len()); self.classes];
        for (i, (&l, &fi)) in self.labels.iter().zip(f.iter()).enumerate() {
            recon[l].axpy(fi, &self.samples.column(i), 1.0);
        }
        Ok(recon
            .iter()
            .map(|r| r.iter().zip(z).map(|(a, b)| (b - a) * (b - a)).sum())
            .collect())
    }

    /// `||z - A f||²` with the full collaborative code.
    pub fn total_residual(&self, z: &[f64]) -> Result<f64> {
        let f = self.code(z)?;
        let recon = &self.samples * f;
        Ok(recon.iter().zip(z).map(|(a, b)| (b - a) * (b - a)).sum())
    }

    pub fn predict(&self, z: &[f64]) -> Result<usize> {
        Ok(argmin_first(self.residuals(z)?))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AggregateMode {
    Voting,
    Sum,
}

/// Plurality over per-patch labels, lowest class on ties.
pub fn aggregate_votes(votes: &[usize], classes: usize) -> Result<usize> {
    if votes.is_empty() {
        return Err(Error::Validation("no patch decisions to aggregate".into()));
    }
    let mut tally = vec![0usize; classes.max(votes.iter().max().unwrap() + 1)];
    for &v in votes {
        tally[v] += 1;
    }
    Ok(argmax_first(tally.iter().map(|&t| t as f64)))
}

/// Combines per-patch class residuals. `Voting` lets every patch vote for its
/// own minimum-residual class; `Sum` picks the minimum of summed residuals.
pub fn modular_aggregate(residuals: &[Vec<f64>], mode: AggregateMode) -> Result<usize> {
    let first = residuals
        .first()
        .ok_or_else(|| Error::Validation("no patch residuals to aggregate".into()))?;
    let classes = first.len();
    if residuals.iter().any(|r| r.len() != classes) {
        return Err(Error::Dimension("patches disagree on class count".into()));
    }
    match mode {
        AggregateMode::Voting => {
            let votes: Vec<usize> = residuals.iter().map(|r| argmin_first(r.iter().copied())).collect();
            aggregate_votes(&votes, classes)
        }
        AggregateMode::Sum => {
            let mut total = vec![0.0; classes];
            for r in residuals {
                total.iter_mut().zip(r).for_each(|(t, v)| *t += v);
            }
            Ok(argmin_first(total))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn gaussian(r: usize, c: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DMatrix::from_fn(r, c, |_, _| rng.sample::<f64, _>(StandardNormal))
    }

    fn rel(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
        (a - b).norm() / b.norm()
    }

    #[test]
    fn blocked_rows_match_dense() {
        // values exactly representable in f32 so both paths see the same data
        for (n, d) in [(12, 5000), (30, 20)] {
            let x = gaussian(n, d, 31).map(|v| v as f32 as f64);
            let rows: Vec<Vec<f32>> = x.row_iter().map(|r| r.iter().map(|&v| v as f32).collect()).collect();
            let labels: Vec<usize> = (0..n).map(|i| i % 3).collect();
            let y = LabelMatrix::from_labels(&labels, 3).unwrap();
            for standardize in [false, true] {
                let dense = fit_ridge(&x, &y, 0.005, standardize).unwrap();
                let blocked = fit_ridge_rows(&rows, &y, 0.005, standardize).unwrap();
                assert!(rel(&blocked.weights, &dense.weights) < 1e-9);
            }
        }
    }

    #[test]
    fn orthonormal_one_per_class() {
        let x = DMatrix::identity(2, 2);
        let y = LabelMatrix::from_labels(&[0, 1], 2).unwrap();
        let model = fit_ridge(&x, &y, 1e-12, false).unwrap();
        assert!((&model.weights - DMatrix::identity(2, 2)).abs().max() < 1e-9);
        assert_eq!(model.predict(&[1.0, 0.0]).unwrap(), 0);
        assert_eq!(model.predict(&[0.0, 1.0]).unwrap(), 1);
        assert_eq!(fit_ridge(&x, &y, 0.005, true).unwrap().delta, DEFAULT_DELTA);
    }

    #[test]
    fn primal_matches_dual() {
        for (n, d) in [(50, 30), (30, 50), (5, 200)] {
            let x = gaussian(n, d, n as u64);
            let labels: Vec<usize> = (0..n).map(|i| i % 3).collect();
            let y = LabelMatrix::from_labels(&labels, 3).unwrap();
            let p = ridge_primal(&x, y.matrix(), DEFAULT_DELTA).unwrap();
            let q = ridge_dual(&x, y.matrix(), DEFAULT_DELTA).unwrap();
            assert!(rel(&q, &p) < 1e-8, "({n},{d}): {}", rel(&q, &p));
        }
    }

    #[test]
    fn duplicated_row_equals_double_weight() {
        let x = gaussian(6, 4, 3);
        let labels = [0, 1, 0, 1, 2, 2];
        let y = LabelMatrix::from_labels(&labels, 3).unwrap();
        let mut rows: Vec<_> = x.row_iter().map(|r| r.into_owned()).collect();
        rows.push(x.row(2).into_owned());
        let xd = DMatrix::from_rows(&rows);
        let mut ld = labels.to_vec();
        ld.push(labels[2]);
        let yd = LabelMatrix::from_labels(&ld, 3).unwrap();
        let w_dup = ridge_primal(&xd, yd.matrix(), 0.1).unwrap();

        let mut omega = DMatrix::identity(6, 6);
        omega[(2, 2)] = 2.0;
        let system = x.transpose() * &omega * &x + DMatrix::identity(4, 4) * 0.1;
        let w_weighted = system.try_inverse().unwrap() * x.transpose() * &omega * y.matrix();
        assert!(rel(&w_dup, &w_weighted) < 1e-10);
    }

    #[test]
    fn prediction_ties_and_dimension() {
        let mut weights = DMatrix::zeros(3, 2);
        weights[(0, 0)] = 1.0;
        weights[(0, 1)] = 1.0;
        let model = RidgeClassifier {
            weights,
            delta: 1.0,
            standardizer: None,
        };
        assert_eq!(model.predict(&[2.0, 0.0, 1.0]).unwrap(), 0);
        assert!(matches!(model.predict(&[1.0]), Err(Error::Dimension(_))));
    }

    #[test]
    fn rejects_non_finite_features() {
        let mut x = gaussian(4, 3, 1);
        x[(1, 1)] = f64::NAN;
        let y = LabelMatrix::from_labels(&[0, 1, 0, 1], 2).unwrap();
        assert!(matches!(fit_ridge(&x, &y, 0.005, true), Err(Error::Validation(_))));
    }

    #[test]
    fn label_matrix_validation() {
        assert!(LabelMatrix::from_labels(&[0, 3], 3).is_err());
        assert!(LabelMatrix::from_matrix(DMatrix::from_row_slice(1, 2, &[1.0, 1.0])).is_err());
        assert!(LabelMatrix::from_matrix(DMatrix::from_row_slice(1, 2, &[0.0, 1.0])).is_ok());
    }

    #[test]
    fn crc_exact_sample_and_limit() {
        let x = gaussian(3, 8, 5);
        let model = fit_residual_crc(&x, &[0, 1, 2], 1e-10).unwrap();
        let probe: Vec<f64> = x.row(1).iter().copied().collect();
        let r = model.residuals(&probe).unwrap();
        assert!(r[1] < 1e-8, "{r:?}");
        assert_eq!(model.predict(&probe).unwrap(), 1);

        let model = fit_residual_crc(&x, &[0, 1, 2], 1e12).unwrap();
        let z: Vec<f64> = gaussian(1, 8, 6).iter().copied().collect();
        let zz: f64 = z.iter().map(|v| v * v).sum();
        for ri in model.residuals(&z).unwrap() {
            assert!((ri - zz).abs() < 1e-6 * zz);
        }

        // zero codes leave every class at ||z||², an exact tie
        let row: Vec<f64> = x.row(0).iter().copied().collect();
        let model = fit_residual_crc(&DMatrix::zeros(2, 8), &[0, 1], 0.1).unwrap();
        let r = model.residuals(&row).unwrap();
        assert_eq!(r[0], r[1]);
        assert_eq!(model.predict(&row).unwrap(), 0);
    }

    #[test]
    fn crc_total_residual_monotone_in_gamma() {
        let x = gaussian(10, 20, 7);
        let labels: Vec<usize> = (0..10).map(|i| i % 2).collect();
        let z: Vec<f64> = gaussian(1, 20, 8).iter().copied().collect();
        let mut last = 0.0;
        for gamma in [1e-4, 1e-3, 1e-2, 0.1, 1.0, 10.0, 100.0] {
            let model = fit_residual_crc(&x, &labels, gamma).unwrap();
            let t = model.total_residual(&z).unwrap();
            assert!(t >= last - 1e-12);
            assert!(model.residuals(&z).unwrap().iter().all(|&r| r >= 0.0));
            last = t;
        }
    }

    #[test]
    fn aggregation_rules() {
        let agree = vec![vec![0.1, 0.5], vec![0.2, 0.9]];
        assert_eq!(modular_aggregate(&agree, AggregateMode::Voting).unwrap(), 0);
        assert_eq!(modular_aggregate(&agree, AggregateMode::Sum).unwrap(), 0);
        assert_eq!(aggregate_votes(&[0, 1, 0], 2).unwrap(), 0);
        assert_eq!(aggregate_votes(&[1, 0], 2).unwrap(), 0);
        assert_eq!(aggregate_votes(&[2, 2, 1], 3).unwrap(), 2);
        // voting and summing can disagree
        let split = vec![vec![1.0, 1.1], vec![1.0, 1.1], vec![9.0, 0.0]];
        assert_eq!(modular_aggregate(&split, AggregateMode::Voting).unwrap(), 0);
        assert_eq!(modular_aggregate(&split, AggregateMode::Sum).unwrap(), 1);
        assert!(modular_aggregate(&[], AggregateMode::Sum).is_err());
    }
}
