//! Dense patch extraction, per-patch contrast normalization and ZCA whitening.

use nalgebra::{DMatrix, DVector};
use sha2::{Digest, Sha256};

use crate::dataio::GrayImage;
use crate::linalg::inv_sqrt_sym;
use crate::{Error, Result};

/// Contrast-normalization epsilon on `[0, 1]` intensities (10 on the 0-255 scale).
pub const DEFAULT_NORM_EPS: f64 = 10.0 / (255.0 * 255.0);
pub const DEFAULT_ZCA_EPS: f64 = 0.1;

/// Flattened square patches as the columns of a `side² x N` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchSet {
    pub data: DMatrix<f64>,
    /// Patch centers `(row, col)` in source-image pixels.
    pub coords: Vec<(f64, f64)>,
    pub sources: Vec<usize>,
    pub side: usize,
}

impl PatchSet {
    pub fn new(data: DMatrix<f64>, coords: Vec<(f64, f64)>, sources: Vec<usize>, side: usize) -> Result<Self> {
        if data.nrows() != side * side {
            return Err(Error::Dimension(format!(
                "patch dimension {} is not {side}²",
                data.nrows()
            )));
        }
        if coords.len() != data.ncols() || sources.len() != data.ncols() {
            return Err(Error::Dimension("coords/sources length differs from patch count".into()));
        }
        Ok(Self {
            data,
            coords,
            sources,
            side,
        })
    }

    /// Patches with no spatial meaning (synthetic data, tests).
    pub fn from_columns(data: DMatrix<f64>) -> Self {
        let n = data.ncols();
        let d = data.nrows();
        let side = (d as f64).sqrt().round() as usize;
        Self {
            data,
            coords: vec![(0.0, 0.0); n],
            sources: vec![0; n],
            side: if side * side == d { side } else { 0 },
        }
    }

    pub fn dim(&self) -> usize {
        self.data.nrows()
    }

    pub fn len(&self) -> usize {
        self.data.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.data.ncols() == 0
    }

    pub fn with_data(&self, data: DMatrix<f64>) -> Self {
        Self {
            data,
            coords: self.coords.clone(),
            sources: self.sources.clone(),
            side: self.side,
        }
    }

    pub fn select(&self, indices: &[usize]) -> Self {
        Self {
            data: self.data.select_columns(indices),
            coords: indices.iter().map(|&i| self.coords[i]).collect(),
            sources: indices.iter().map(|&i| self.sources[i]).collect(),
            side: self.side,
        }
    }

    pub fn concat(parts: &[PatchSet]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Validation("no patch sets to concatenate".into()))?;
        let d = first.dim();
        if parts.iter().any(|p| p.dim() != d) {
            return Err(Error::Dimension("patch sets differ in dimension".into()));
        }
        let n: usize = parts.iter().map(PatchSet::len).sum();
        let mut data = DMatrix::zeros(d, n);
        let mut coords = Vec::with_capacity(n);
        let mut sources = Vec::with_capacity(n);
        let mut at = 0;
        for p in parts {
            data.columns_mut(at, p.len()).copy_from(&p.data);
            at += p.len();
            coords.extend_from_slice(&p.coords);
            sources.extend_from_slice(&p.sources);
        }
        Ok(Self {
            data,
            coords,
            sources,
            side: first.side,
        })
    }
}

/// Every `side x side` window at the given stride, in raster order.
pub fn extract_patches(img: &GrayImage, side: usize, stride: usize, source: usize) -> Result<PatchSet> {
    let (h, w) = (img.height(), img.width());
    if side == 0 || side > h.min(w) {
        return Err(Error::Dimension(format!("patch side {side} for a {w}x{h} image")));
    }
    if stride == 0 {
        return Err(Error::Validation("stride must be at least 1".into()));
    }
    let rows = (h - side) / stride + 1;
    let cols = (w - side) / stride + 1;
    let d = side * side;
    let n = rows * cols;
    let mut data = DMatrix::zeros(d, n);
    let mut coords = Vec::with_capacity(n);
    let half = (side as f64 - 1.0) / 2.0;
    for pr in 0..rows {
        for pc in 0..cols {
            let (top, left) = (pr * stride, pc * stride);
            let mut col = data.column_mut(coords.len());
            for dr in 0..side {
                for dc in 0..side {
                    col[dr * side + dc] = img.get(top + dr, left + dc);
                }
            }
            coords.push((top as f64 + half, left as f64 + half));
        }
    }
    Ok(PatchSet {
        data,
        coords,
        sources: vec![source; n],
        side,
    })
}

fn normalize_column(mut col: nalgebra::DVectorViewMut<'_, f64>, eps: f64) {
    let d = col.len() as f64;
    let first = col[0];
    if col.iter().all(|&v| v == first) {
        col.fill(0.0);
        return;
    }
    let mean = col.sum() / d;
    col.add_scalar_mut(-mean);
    let var = col.norm_squared() / d;
    col.scale_mut(1.0 / (var + eps).sqrt());
}

/// Per-column `(x - mean) / sqrt(var + eps)` with population variance.
pub fn contrast_normalize(patches: &PatchSet, eps: f64) -> PatchSet {
    let mut out = patches.clone();
    contrast_normalize_in_place(&mut out, eps);
    out
}

pub fn contrast_normalize_in_place(patches: &mut PatchSet, eps: f64) {
    for col in patches.data.column_iter_mut() {
        normalize_column(col, eps);
    }
}

/// Contrast-normalization constant plus the fitted ZCA mean and transform.
#[derive(Debug, Clone, PartialEq)]
pub struct WhiteningModel {
    pub norm_eps: f64,
    pub zca_eps: f64,
    pub mean: DVector<f64>,
    pub transform: DMatrix<f64>,
}

/// Fits ZCA on already contrast-normalized patches; `transform = (Σ + εI)^(-1/2)`.
pub fn zca_fit(patches: &PatchSet, zca_eps: f64) -> Result<WhiteningModel> {
    WhiteningModel::fit(patches, DEFAULT_NORM_EPS, zca_eps)
}

pub fn zca_apply(model: &WhiteningModel, patches: &PatchSet) -> Result<PatchSet> {
    model.apply(patches)
}

/// Sample covariance with a `1/N` normalizer.
pub fn covariance(data: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let n = data.ncols() as f64;
    let mean = data.column_mean();
    let mut centered = data.clone();
    for mut col in centered.column_iter_mut() {
        col -= &mean;
    }
    let cov = (&centered * centered.transpose()) / n;
    (mean, (&cov + cov.transpose()) * 0.5)
}

impl WhiteningModel {
    pub fn fit(normalized: &PatchSet, norm_eps: f64, zca_eps: f64) -> Result<Self> {
        if normalized.is_empty() {
            return Err(Error::Validation("cannot fit whitening on zero patches".into()));
        }
        if zca_eps < 0.0 || !zca_eps.is_finite() {
            return Err(Error::Validation(format!("zca epsilon {zca_eps}")));
        }
        let (mean, cov) = covariance(&normalized.data);
        let transform = inv_sqrt_sym(&cov, zca_eps)?;
        Ok(Self {
            norm_eps,
            zca_eps,
            mean,
            transform,
        })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// `x -> transform (x - mean)` for every column.
    pub fn apply(&self, patches: &PatchSet) -> Result<PatchSet> {
        if patches.dim() != self.dim() {
            return Err(Error::Dimension(format!(
                "patch dimension {} vs whitening dimension {}",
                patches.dim(),
                self.dim()
            )));
        }
        let mut centered = patches.data.clone();
        for mut col in centered.column_iter_mut() {
            col -= &self.mean;
        }
        Ok(patches.with_data(&self.transform * centered))
    }

    /// Contrast normalization followed by whitening, for raw extracted patches.
    pub fn preprocess(&self, raw: &PatchSet) -> Result<PatchSet> {
        let normalized = contrast_normalize(raw, self.norm_eps);
        self.apply(&normalized)
    }

    /// Content hash used as the model id in provenance records.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.norm_eps.to_le_bytes());
        h.update(self.zca_eps.to_le_bytes());
        for v in self.mean.iter().chain(self.transform.iter()) {
            h.update(v.to_le_bytes());
        }
        hex(&h.finalize()[..8])
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::SymmetricEigen;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rows: usize, cols: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DMatrix::from_fn(rows, cols, |_, _| rng.random::<f64>() * 2.0 - 1.0)
    }

    #[test]
    fn patch_counts() {
        let img = GrayImage::constant(32, 32, 0.5).unwrap();
        assert_eq!(extract_patches(&img, 6, 1, 0).unwrap().len(), 729);

        let img = GrayImage::from_fn(6, 6, |r, c| (r * 6 + c) as f64 / 35.0).unwrap();
        let p = extract_patches(&img, 6, 1, 3).unwrap();
        assert_eq!(p.len(), 1);
        assert_eq!(p.data.as_slice(), img.values());
        assert_eq!(p.sources, vec![3]);
    }

    #[test]
    fn strided_coords_are_centers() {
        let img = GrayImage::constant(8, 8, 0.1).unwrap();
        let p = extract_patches(&img, 6, 2, 0).unwrap();
        assert_eq!(p.coords, vec![(2.5, 2.5), (2.5, 4.5), (4.5, 2.5), (4.5, 4.5)]);
    }

    #[test]
    fn count_formula_exhaustive_small_grids() {
        for h in 1..=64 {
            for w in 1..=64 {
                let img = GrayImage::constant(w, h, 0.0).unwrap();
                for side in [1, 2, 3, 6, 9] {
                    for stride in [1, 2, 3, 5] {
                        let res = extract_patches(&img, side, stride, 0);
                        if side > h.min(w) {
                            assert!(matches!(res, Err(Error::Dimension(_))));
                            continue;
                        }
                        let p = res.unwrap();
                        let expect = ((h - side) / stride + 1) * ((w - side) / stride + 1);
                        assert_eq!(p.len(), expect, "{h}x{w} side {side} stride {stride}");
                        assert!(p.coords.iter().all(|&(r, c)| r < h as f64 && c < w as f64));
                    }
                }
            }
        }
    }

    #[test]
    fn contrast_normalization_moments() {
        let constant = PatchSet::from_columns(DMatrix::from_element(36, 1, 0.7));
        let out = contrast_normalize(&constant, DEFAULT_NORM_EPS);
        assert!(out.data.iter().all(|&v| v == 0.0));

        let data = random_matrix(36, 50, 1);
        let out = contrast_normalize(&PatchSet::from_columns(data.clone()), 0.05);
        for (raw, col) in data.column_iter().zip(out.data.column_iter()) {
            let d = raw.len() as f64;
            let mean = raw.sum() / d;
            let var = raw.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d;
            let out_mean = col.sum() / d;
            let out_var = col.iter().map(|v| (v - out_mean).powi(2)).sum::<f64>() / d;
            assert!(out_mean.abs() <= 1e-10);
            assert!((out_var - var / (var + 0.05)).abs() < 1e-12);
        }
    }

    #[test]
    fn unit_variance_patch_is_fixed_point() {
        // ±1 alternating has mean 0 and population variance 1
        let col: Vec<f64> = (0..36).map(|i| if i % 2 == 0 { 1.0 } else { -1.0 }).collect();
        let p = PatchSet::from_columns(DMatrix::from_vec(36, 1, col.clone()));
        let out = contrast_normalize(&p, 1e-12);
        for (a, b) in out.data.iter().zip(&col) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn identity_covariance_gives_identity_transform() {
        // ±sqrt(d) e_i columns: zero mean, covariance exactly I
        let d = 4;
        let s = (d as f64).sqrt();
        let mut data = DMatrix::zeros(d, 2 * d);
        for i in 0..d {
            data[(i, 2 * i)] = s;
            data[(i, 2 * i + 1)] = -s;
        }
        let model = zca_fit(&PatchSet::from_columns(data), 0.0).unwrap();
        assert!((&model.transform - DMatrix::identity(d, d)).abs().max() < 1e-8);
    }

    #[test]
    fn diagonal_covariance_closed_form() {
        // values ±2 on axis 0, ±1 on axis 1 -> Σ = diag(4, 1)
        let data = DMatrix::from_row_slice(2, 4, &[2.0, -2.0, 0.0, 0.0, 0.0, 0.0, 1.0, -1.0]);
        let data = data * 2f64.sqrt();
        let (_, cov) = covariance(&data);
        assert!((cov[(0, 0)] - 4.0).abs() < 1e-12 && (cov[(1, 1)] - 1.0).abs() < 1e-12);
        let model = zca_fit(&PatchSet::from_columns(data), 0.0).unwrap();
        let expect = DMatrix::from_row_slice(2, 2, &[0.5, 0.0, 0.0, 1.0]);
        assert!((&model.transform - expect).abs().max() < 1e-8);
    }

    #[test]
    fn whitened_spectrum_matches_shrinkage() {
        let mut data = random_matrix(6, 400, 7);
        // anisotropic scales so the spectrum is spread
        for (i, mut row) in data.row_iter_mut().enumerate() {
            row *= 1.0 + i as f64;
        }
        let eps = 0.3;
        let patches = PatchSet::from_columns(data.clone());
        let model = zca_fit(&patches, eps).unwrap();
        let (_, cov) = covariance(&data);
        let mut expected: Vec<f64> = SymmetricEigen::new(cov.clone())
            .eigenvalues
            .iter()
            .map(|l| l / (l + eps))
            .collect();
        let white = zca_apply(&model, &patches).unwrap();
        let (_, wcov) = covariance(&white.data);
        let mut got: Vec<f64> = SymmetricEigen::new(wcov).eigenvalues.iter().copied().collect();
        expected.sort_by(f64::total_cmp);
        got.sort_by(f64::total_cmp);
        for (g, e) in got.iter().zip(&expected) {
            assert!((g - e).abs() < 1e-8, "{g} vs {e}");
        }

        // symmetric, and T² = (Σ + εI)^(-1)
        let t = &model.transform;
        assert!((t - t.transpose()).abs().max() < 1e-8);
        let inv = (cov + DMatrix::identity(6, 6) * eps).try_inverse().unwrap();
        let sq = t * t;
        assert!((&sq - &inv).norm() / inv.norm() < 1e-6);
    }

    #[test]
    fn apply_identity_and_mean() {
        let model = WhiteningModel {
            norm_eps: DEFAULT_NORM_EPS,
            zca_eps: 0.0,
            mean: DVector::zeros(3),
            transform: DMatrix::identity(3, 3),
        };
        let data = random_matrix(3, 5, 2);
        let out = model.apply(&PatchSet::from_columns(data.clone())).unwrap();
        assert_eq!(out.data, data);

        let fitted = zca_fit(&PatchSet::from_columns(random_matrix(3, 50, 3)), 0.1).unwrap();
        let at_mean = PatchSet::from_columns(DMatrix::from_column_slice(3, 1, fitted.mean.as_slice()));
        assert!(fitted.apply(&at_mean).unwrap().data.abs().max() < 1e-15);

        let wrong = PatchSet::from_columns(DMatrix::zeros(4, 2));
        assert!(matches!(fitted.apply(&wrong), Err(Error::Dimension(_))));
    }

    #[test]
    fn singular_covariance_needs_epsilon() {
        let data = DMatrix::from_row_slice(2, 3, &[1.0, 2.0, 3.0, 1.0, 2.0, 3.0]);
        let p = PatchSet::from_columns(data);
        assert!(matches!(zca_fit(&p, 0.0), Err(Error::Singular(_))));
        assert!(zca_fit(&p, 0.1).is_ok());
    }
}
