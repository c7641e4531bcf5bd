//! Images, dataset manifests and seeded train/test splits.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use image::{DynamicImage, ImageReader};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::{Error, Result};

/// Single-channel image with row-major intensities in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    width: usize,
    height: usize,
    values: Vec<f64>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, values: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Dimension(format!("empty image {width}x{height}")));
        }
        if values.len() != width * height {
            return Err(Error::Dimension(format!(
                "{} values for a {width}x{height} image",
                values.len()
            )));
        }
        if let Some(v) = values.iter().find(|v| !v.is_finite() || **v < 0.0 || **v > 1.0) {
            return Err(Error::Validation(format!("intensity {v} outside [0, 1]")));
        }
        Ok(Self {
            width,
            height,
            values,
        })
    }

    pub fn constant(width: usize, height: usize, value: f64) -> Result<Self> {
        Self::new(width, height, vec![value; width * height])
    }

    /// Builds an image from a closure over `(row, col)`, clamping into `[0, 1]`.
    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> f64) -> Result<Self> {
        let mut values = Vec::with_capacity(width * height);
        for r in 0..height {
            for c in 0..width {
                values.push(f(r, c).clamp(0.0, 1.0));
            }
        }
        Self::new(width, height, values)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.width + col]
    }
}

/// Loads an 8-bit grayscale or RGB raster. RGB is reduced with BT.601 luma.
pub fn load_image(path: impl AsRef<Path>) -> Result<GrayImage> {
    let path = path.as_ref();
    let reader = ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?;
    let decoded = reader
        .decode()
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    from_dynamic(decoded).map_err(|e| e.context(path.display().to_string()))
}

/// Decodes an in-memory encoded image (PNG, PGM, ...).
pub fn decode_image(bytes: &[u8]) -> Result<GrayImage> {
    let decoded = image::load_from_memory(bytes).map_err(|e| Error::Format(e.to_string()))?;
    from_dynamic(decoded)
}

fn luma601(r: u8, g: u8, b: u8) -> f64 {
    (0.299 * r as f64 + 0.587 * g as f64 + 0.114 * b as f64) / 255.0
}

fn from_dynamic(img: DynamicImage) -> Result<GrayImage> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let values: Vec<f64> = match img {
        DynamicImage::ImageLuma8(buf) => buf.pixels().map(|p| p.0[0] as f64 / 255.0).collect(),
        DynamicImage::ImageLumaA8(buf) => buf.pixels().map(|p| p.0[0] as f64 / 255.0).collect(),
        DynamicImage::ImageRgb8(buf) => buf.pixels().map(|p| luma601(p.0[0], p.0[1], p.0[2])).collect(),
        DynamicImage::ImageRgba8(buf) => buf.pixels().map(|p| luma601(p.0[0], p.0[1], p.0[2])).collect(),
        other => {
            return Err(Error::Format(format!(
                "unsupported pixel layout {:?}; expected 8-bit gray or RGB",
                other.color()
            )))
        }
    };
    // luma of (255,255,255) can land a hair above 1.0
    GrayImage::new(w, h, values.into_iter().map(|v| v.min(1.0)).collect())
}

/// Writes an 8-bit grayscale PNG (or any format implied by the extension).
pub fn save_image(img: &GrayImage, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes: Vec<u8> = img.values.iter().map(|v| (v * 255.0).round() as u8).collect();
    let buf = image::GrayImage::from_raw(img.width as u32, img.height as u32, bytes)
        .expect("buffer length matches dimensions");
    buf.save(path).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::Format(other.to_string()),
    })
}

/// Bilinear resampling with pixel-center alignment.
pub fn resize(img: &GrayImage, width: usize, height: usize) -> Result<GrayImage> {
    if width == 0 || height == 0 {
        return Err(Error::Dimension(format!("target size {width}x{height}")));
    }
    if width == img.width && height == img.height {
        return Ok(img.clone());
    }
    let taps = |out: usize, inp: usize| -> Vec<(usize, usize, f64)> {
        let scale = inp as f64 / out as f64;
        (0..out)
            .map(|i| {
                let src = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (inp - 1) as f64);
                let lo = src.floor() as usize;
                let hi = (lo + 1).min(inp - 1);
                (lo, hi, src - lo as f64)
            })
            .collect()
    };
    let rows = taps(height, img.height);
    let cols = taps(width, img.width);
    let mut values = Vec::with_capacity(width * height);
    for &(r0, r1, fr) in &rows {
        for &(c0, c1, fc) in &cols {
            let top = img.get(r0, c0) * (1.0 - fc) + img.get(r0, c1) * fc;
            let bottom = img.get(r1, c0) * (1.0 - fc) + img.get(r1, c1) * fc;
            values.push((top * (1.0 - fr) + bottom * fr).clamp(0.0, 1.0));
        }
    }
    GrayImage::new(width, height, values)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub path: PathBuf,
    pub label: usize,
    pub subject: String,
}

/// Labelled image list. Relative paths resolve against `base_dir`.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
    pub class_count: usize,
    pub base_dir: PathBuf,
}

impl DatasetManifest {
    pub fn new(entries: Vec<ManifestEntry>, base_dir: impl Into<PathBuf>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::Validation("manifest has no entries".into()));
        }
        let mut seen = HashSet::new();
        for e in &entries {
            if !seen.insert(&e.path) {
                return Err(Error::Validation(format!("duplicate path {}", e.path.display())));
            }
        }
        let class_count = entries.iter().map(|e| e.label).max().unwrap() + 1;
        let mut present = vec![false; class_count];
        for e in &entries {
            present[e.label] = true;
        }
        if let Some(missing) = present.iter().position(|p| !p) {
            return Err(Error::Validation(format!(
                "labels must be contiguous in [0, {class_count}); label {missing} has no entries"
            )));
        }
        Ok(Self {
            entries,
            class_count,
            base_dir: base_dir.into(),
        })
    }

    /// Parses `relative_path,label,subject` records; blank lines and `#` comments are skipped.
    pub fn parse(text: &str, base_dir: impl Into<PathBuf>) -> Result<Self> {
        let mut entries = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split(',').map(str::trim).collect();
            if fields.len() != 3 {
                return Err(Error::Format(format!(
                    "manifest line {}: expected path,label,subject",
                    lineno + 1
                )));
            }
            let label = fields[1].parse::<usize>().map_err(|_| {
                Error::Format(format!("manifest line {}: bad label {:?}", lineno + 1, fields[1]))
            })?;
            entries.push(ManifestEntry {
                path: PathBuf::from(fields[0]),
                label,
                subject: fields[2].to_string(),
            });
        }
        Self::new(entries, base_dir)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::parse(&text, base)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::from("# path,label,subject\n");
        for e in &self.entries {
            out.push_str(&format!("{},{},{}\n", e.path.display(), e.label, e.subject));
        }
        out
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.entries.iter().map(|e| e.label).collect()
    }

    pub fn resolve(&self, index: usize) -> PathBuf {
        self.base_dir.join(&self.entries[index].path)
    }

    /// Loads entry `index` and resizes it to `size`x`size` when a size is given.
    pub fn load_entry(&self, index: usize, size: Option<usize>) -> Result<GrayImage> {
        let img = load_image(self.resolve(index))?;
        match size {
            Some(s) => resize(&img, s, s),
            None => Ok(img),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TestCount {
    Count(usize),
    Rest,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SplitSpec {
    pub seed: u64,
    pub train_per_class: usize,
    pub test_per_class: TestCount,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// Seeded per-class split; both index lists come back sorted.
pub fn make_split(manifest: &DatasetManifest, spec: &SplitSpec) -> Result<Split> {
    if spec.train_per_class == 0 {
        return Err(Error::Validation("train-per-class must be at least 1".into()));
    }
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); manifest.class_count];
    for (i, e) in manifest.entries.iter().enumerate() {
        by_class[e.label].push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (class, mut members) in by_class.into_iter().enumerate() {
        let required = spec.train_per_class
            + match spec.test_per_class {
                TestCount::Count(n) => n,
                TestCount::Rest => 0,
            };
        if members.len() < required {
            return Err(Error::InsufficientSamples {
                class,
                available: members.len(),
                required,
            });
        }
        members.shuffle(&mut rng);
        let (tr, rest) = members.split_at(spec.train_per_class);
        train.extend_from_slice(tr);
        match spec.test_per_class {
            TestCount::Count(n) => test.extend_from_slice(&rest[..n]),
            TestCount::Rest => test.extend_from_slice(rest),
        }
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok(Split { train, test })
}
