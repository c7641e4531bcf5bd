//! Modular residual baselines: one collaborative-representation model per
//! block location, aggregated by voting or by summed residuals.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use super::experiment::{mean_std, run_seed, ExperimentData};
use crate::classifier::{fit_residual_crc, modular_aggregate, AggregateMode, ResidualModel};
use crate::dataio::{make_split, GrayImage};
use crate::{Error, Result};

/// Top-left corners of every block at the configured side and stride.
pub fn block_positions(height: usize, width: usize, side: usize, stride: usize) -> Vec<(usize, usize)> {
    if side == 0 || stride == 0 || side > height || side > width {
        return Vec::new();
    }
    let mut out = Vec::new();
    for top in (0..=height - side).step_by(stride) {
        for left in (0..=width - side).step_by(stride) {
            out.push((top, left));
        }
    }
    out
}

/// Raw block pixels scaled to unit L2 norm (zero blocks stay zero).
pub fn block_vector(img: &GrayImage, top: usize, left: usize, side: usize) -> Vec<f64> {
    let mut v = Vec::with_capacity(side * side);
    for r in top..top + side {
        for c in left..left + side {
            v.push(img.get(r, c));
        }
    }
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
    v
}

/// Accuracies `(sum, voting)` of the modular baselines for one seed.
pub fn modular_seed(cfg: &ExperimentConfig, data: &ExperimentData, seed: u64) -> Result<(f64, f64)> {
    let ds = &data.dataset;
    let split = make_split(&ds.manifest, &cfg.split_spec(seed))?;
    let labels = ds.labels();
    let (h, w) = (ds.images[0].height(), ds.images[0].width());
    let m = &cfg.modular;
    let positions = block_positions(h, w, m.side, m.stride);
    if positions.is_empty() {
        return Err(Error::Validation(format!("no {}x{} blocks fit a {w}x{h} image", m.side, m.side)));
    }
    let train_labels: Vec<usize> = split.train.iter().map(|&i| labels[i]).collect();
    let models = positions
        .par_iter()
        .map(|&(top, left)| {
            let rows: Vec<Vec<f64>> = split
                .train
                .iter()
                .map(|&i| block_vector(&ds.images[i], top, left, m.side))
                .collect();
            let x = DMatrix::from_fn(rows.len(), m.side * m.side, |i, j| rows[i][j]);
            fit_residual_crc(&x, &train_labels, m.gamma)
        })
        .collect::<Result<Vec<ResidualModel>>>()?;
    let decisions = split
        .test
        .par_iter()
        .map(|&i| {
            let residuals = positions
                .iter()
                .zip(&models)
                .map(|(&(top, left), model)| model.residuals(&block_vector(&ds.images[i], top, left, m.side)))
                .collect::<Result<Vec<_>>>()?;
            let sum = modular_aggregate(&residuals, AggregateMode::Sum)?;
            let vote = modular_aggregate(&residuals, AggregateMode::Voting)?;
            Ok(((sum == labels[i]) as usize, (vote == labels[i]) as usize))
        })
        .collect::<Result<Vec<_>>>()?;
    let n = decisions.len() as f64;
    let sum_hits: usize = decisions.iter().map(|d| d.0).sum();
    let vote_hits: usize = decisions.iter().map(|d| d.1).sum();
    Ok((100.0 * sum_hits as f64 / n, 100.0 * vote_hits as f64 / n))
}

/// Per-seed accuracies of the learned-feature pipeline and both modular baselines.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModularComparison {
    pub fingerprint: String,
    pub seeds: Vec<u64>,
    pub pipeline: Vec<f64>,
    pub sum: Vec<f64>,
    pub voting: Vec<f64>,
}

impl ModularComparison {
    /// Means of (pipeline, sum, voting).
    pub fn means(&self) -> (f64, f64, f64) {
        (mean_std(&self.pipeline).0, mean_std(&self.sum).0, mean_std(&self.voting).0)
    }
}

pub fn run_modular_comparison(cfg: &ExperimentConfig) -> Result<ModularComparison> {
    let data = ExperimentData::load(cfg)?;
    run_modular_comparison_with(cfg, &data)
}

pub fn run_modular_comparison_with(cfg: &ExperimentConfig, data: &ExperimentData) -> Result<ModularComparison> {
    let per_seed = cfg
        .seeds
        .par_iter()
        .map(|&s| {
            let pipeline = run_seed(cfg, data, s)?.accuracy;
            let (sum, voting) = modular_seed(cfg, data, s)?;
            Ok((pipeline, sum, voting))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ModularComparison {
        fingerprint: cfg.fingerprint(),
        seeds: cfg.seeds.clone(),
        pipeline: per_seed.iter().map(|p| p.0).collect(),
        sum: per_seed.iter().map(|p| p.1).collect(),
        voting: per_seed.iter().map(|p| p.2).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn positions_cover_the_grid() {
        assert_eq!(block_positions(8, 8, 4, 4), vec![(0, 0), (0, 4), (4, 0), (4, 4)]);
        assert_eq!(block_positions(10, 8, 8, 4).len(), 1);
        assert!(block_positions(4, 4, 5, 1).is_empty());
    }

    #[test]
    fn block_vectors_are_unit() {
        let img = GrayImage::from_fn(6, 6, |r, c| (r + c) as f64 / 10.0).unwrap();
        let v = block_vector(&img, 1, 2, 3);
        assert!((v.iter().map(|x| x * x).sum::<f64>() - 1.0).abs() < 1e-12);
        let zero = GrayImage::constant(4, 4, 0.0).unwrap();
        assert!(block_vector(&zero, 0, 0, 2).iter().all(|&x| x == 0.0));
    }
}
