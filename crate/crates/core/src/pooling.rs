//! Spatial pyramid pooling of code maps into fixed-length feature vectors.

use std::fmt;
use std::str::FromStr;

use crate::encoders::CodeMap;
use crate::{Error, Result};

/// Grid sides a pyramid may use, in order.
pub const GRID_SIDES: [usize; 5] = [1, 2, 4, 6, 8];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PoolMode {
    Max,
    Average,
}

impl fmt::Display for PoolMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PoolMode::Max => "max",
            PoolMode::Average => "average",
        })
    }
}

impl FromStr for PoolMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "max" | "mp" => Ok(PoolMode::Max),
            "average" | "avg" | "mean" | "ap" => Ok(PoolMode::Average),
            other => Err(Error::Config(format!("unknown pooling mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct PyramidSpec {
    levels: Vec<usize>,
    pub mode: PoolMode,
}

impl PyramidSpec {
    /// Levels must be a strictly increasing subset of `{1, 2, 4, 6, 8}`.
    pub fn new(levels: Vec<usize>, mode: PoolMode) -> Result<Self> {
        if levels.is_empty() || levels.len() > GRID_SIDES.len() {
            return Err(Error::Validation(format!("{} pyramid levels", levels.len())));
        }
        if let Some(g) = levels.iter().find(|g| !GRID_SIDES.contains(g)) {
            return Err(Error::Validation(format!("grid side {g} not in {GRID_SIDES:?}")));
        }
        if levels.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Validation(format!("levels {levels:?} not strictly increasing")));
        }
        Ok(Self { levels, mode })
    }

    /// The first `count` standard levels, e.g. 3 -> `{1, 2, 4}`.
    pub fn standard(count: usize, mode: PoolMode) -> Result<Self> {
        if count == 0 || count > GRID_SIDES.len() {
            return Err(Error::Validation(format!("{count} pyramid levels")));
        }
        Self::new(GRID_SIDES[..count].to_vec(), mode)
    }

    pub fn levels(&self) -> &[usize] {
        &self.levels
    }

    pub fn cell_count(&self) -> usize {
        self.levels.iter().map(|g| g * g).sum()
    }

    pub fn feature_len(&self, code_dim: usize) -> usize {
        code_dim * self.cell_count()
    }
}

impl fmt::Display for PyramidSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let levels: Vec<String> = self.levels.iter().map(usize::to_string).collect();
        write!(f, "{}[{}]", self.mode, levels.join(","))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector {
    pub values: Vec<f64>,
    pub code_dim: usize,
}

impl FeatureVector {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Cell index along one axis: `floor(pos * g / extent)` clamped to `g - 1`.
#[inline]
fn cell(pos: f64, grid: usize, extent: usize) -> usize {
    ((pos * grid as f64 / extent as f64).floor() as usize).min(grid - 1)
}

/// Pools codes over every pyramid cell. Output layout: level-major, cells in
/// row-major order, code dimensions contiguous within a cell. Empty cells are 0.
pub fn pool_pyramid(codes: &CodeMap, spec: &PyramidSpec, extent: (usize, usize)) -> Result<FeatureVector> {
    let (h, w) = extent;
    let k = codes.code_dim();
    if let Some(&(r, c)) = codes
        .coords
        .iter()
        .find(|&&(r, c)| !(r >= 0.0 && c >= 0.0 && r < h as f64 && c < w as f64))
    {
        return Err(Error::Dimension(format!("patch center ({r}, {c}) outside {h}x{w}")));
    }
    let mut values = vec![0.0; spec.feature_len(k)];
    let mut offset = 0;
    for &g in spec.levels() {
        let block = &mut values[offset..offset + g * g * k];
        let mut counts = vec![0usize; g * g];
        for (i, &(r, c)) in codes.coords.iter().enumerate() {
            let idx = cell(r, g, h) * g + cell(c, g, w);
            let dst = &mut block[idx * k..(idx + 1) * k];
            let src = codes.codes.column(i);
            match spec.mode {
                PoolMode::Max if counts[idx] == 0 => dst.iter_mut().zip(src.iter()).for_each(|(d, s)| *d = *s),
                PoolMode::Max => dst.iter_mut().zip(src.iter()).for_each(|(d, s)| *d = d.max(*s)),
                PoolMode::Average => dst.iter_mut().zip(src.iter()).for_each(|(d, s)| *d += *s),
            }
            counts[idx] += 1;
        }
        if spec.mode == PoolMode::Average {
            for (idx, &n) in counts.iter().enumerate() {
                if n > 0 {
                    block[idx * k..(idx + 1) * k].iter_mut().for_each(|v| *v /= n as f64);
                }
            }
        }
        offset += g * g * k;
    }
    Ok(FeatureVector { values, code_dim: k })
}
