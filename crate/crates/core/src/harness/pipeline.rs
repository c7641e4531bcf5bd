//! A fitted front end: per-channel whitening and dictionary, then encoding and
//! pyramid pooling of whole images.

use std::path::Path;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use sha2::{Digest, Sha256};

use super::config::{Channel, DictionarySource, ExperimentConfig};
use crate::dataio::{DatasetManifest, GrayImage};
use crate::dictionary::{build_dictionary, Dictionary};
use crate::encoders::{CodeMap, Encoder, PreparedEncoder};
use crate::lbp::{fuse, lbp_code_image};
use crate::pooling::{pool_pyramid, FeatureVector, PyramidSpec};
use crate::preprocess::{contrast_normalize, extract_patches, hex, PatchSet, WhiteningModel};
use crate::{Error, Result};

/// A manifest with its images decoded and resized.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub images: Vec<GrayImage>,
}

impl Dataset {
    pub fn load(path: impl AsRef<Path>, size: usize) -> Result<Self> {
        let path = path.as_ref();
        let manifest = DatasetManifest::load(path)?;
        Self::from_manifest(manifest, size).map_err(|e| e.context(format!("loading {}", path.display())))
    }

    pub fn from_manifest(manifest: DatasetManifest, size: usize) -> Result<Self> {
        let images = (0..manifest.len())
            .into_par_iter()
            .map(|i| manifest.load_entry(i, Some(size)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { manifest, images })
    }

    pub fn labels(&self) -> Vec<usize> {
        self.manifest.labels()
    }
}

pub fn channel_image(img: &GrayImage, channel: Channel) -> Result<GrayImage> {
    match channel {
        Channel::Raw => Ok(img.clone()),
        Channel::Lbp => lbp_code_image(img),
    }
}

/// Mixes a run seed with a purpose tag.
pub(crate) fn derive_seed(seed: u64, tag: u64) -> u64 {
    ChaCha8Rng::seed_from_u64(seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15)).random()
}

fn window_count(img: &GrayImage, side: usize, stride: usize) -> (usize, usize) {
    if side > img.height() || side > img.width() {
        return (0, 0);
    }
    ((img.height() - side) / stride + 1, (img.width() - side) / stride + 1)
}

/// Draws up to `count` windows uniformly without replacement from the pooled
/// windows of `images`. Sources are the paired ids.
pub fn sample_patches(images: &[(usize, GrayImage)], side: usize, stride: usize, count: usize, seed: u64) -> Result<PatchSet> {
    if side == 0 || stride == 0 {
        return Err(Error::Validation("patch side and stride must be positive".into()));
    }
    let grids: Vec<(usize, usize)> = images.iter().map(|(_, im)| window_count(im, side, stride)).collect();
    let mut offsets = Vec::with_capacity(images.len() + 1);
    offsets.push(0usize);
    for (r, c) in &grids {
        offsets.push(offsets.last().unwrap() + r * c);
    }
    let total = *offsets.last().unwrap();
    if total == 0 {
        return Err(Error::InsufficientPatches {
            required: count.max(1),
            available: 0,
        });
    }
    let mut chosen = if count >= total {
        (0..total).collect()
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        sample(&mut rng, total, count).into_vec()
    };
    chosen.sort_unstable();
    let d = side * side;
    let half = (side as f64 - 1.0) / 2.0;
    let mut data = nalgebra::DMatrix::zeros(d, chosen.len());
    let mut coords = Vec::with_capacity(chosen.len());
    let mut sources = Vec::with_capacity(chosen.len());
    let mut img_idx = 0;
    for (k, &g) in chosen.iter().enumerate() {
        while offsets[img_idx + 1] <= g {
            img_idx += 1;
        }
        let local = g - offsets[img_idx];
        let (id, img) = &images[img_idx];
        let cols = grids[img_idx].1;
        let (top, left) = ((local / cols) * stride, (local % cols) * stride);
        let mut col = data.column_mut(k);
        for dr in 0..side {
            for dc in 0..side {
                col[dr * side + dc] = img.get(top + dr, left + dc);
            }
        }
        coords.push((top as f64 + half, left as f64 + half));
        sources.push(*id);
    }
    PatchSet::new(data, coords, sources, side)
}

/// Uniform-noise images used as a dataset-free dictionary source.
pub fn noise_images(count: usize, size: usize, seed: u64) -> Result<Vec<GrayImage>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| GrayImage::from_fn(size, size, |_, _| rng.random::<f64>()))
        .collect()
}

/// Which images fed a channel's whitening and dictionary.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchProvenance {
    /// `train`, `noise` or the external manifest path.
    pub source: String,
    /// Distinct source image ids (dataset indices for `train`).
    pub images: Vec<usize>,
    pub patches: usize,
}

#[derive(Debug, Clone)]
pub struct ChannelModel {
    pub channel: Channel,
    pub whitening: WhiteningModel,
    encoder: PreparedEncoder,
    pub provenance: Option<PatchProvenance>,
}

impl ChannelModel {
    pub fn new(channel: Channel, whitening: WhiteningModel, dictionary: &Dictionary, encoder: Encoder) -> Result<Self> {
        if dictionary.dim() != whitening.dim() {
            return Err(Error::Dimension(format!(
                "dictionary dimension {} vs whitening dimension {}",
                dictionary.dim(),
                whitening.dim()
            )));
        }
        Ok(Self {
            channel,
            whitening,
            encoder: encoder.prepare(dictionary)?,
            provenance: None,
        })
    }

    pub fn dictionary(&self) -> &Dictionary {
        self.encoder.dictionary()
    }

    pub fn encoder(&self) -> Encoder {
        self.encoder.encoder()
    }
}

/// Fitted models for every channel plus the shared encode/pool settings.
#[derive(Debug, Clone)]
pub struct FittedPipeline {
    pub channels: Vec<ChannelModel>,
    pub patch_side: usize,
    pub patch_stride: usize,
    pub pyramid: PyramidSpec,
}

impl FittedPipeline {
    /// Fits whitening and a dictionary per channel from the configured patch
    /// source. Only `train` images of `dataset` are read when the source is the
    /// training set; otherwise `dataset` is not touched at all.
    pub fn fit(cfg: &ExperimentConfig, dataset: &Dataset, train: &[usize], external: Option<&Dataset>, seed: u64) -> Result<Self> {
        let mut channels = Vec::with_capacity(cfg.channels.len());
        for (ci, &channel) in cfg.channels.iter().enumerate() {
            let tag = ci as u64 + 1;
            let source_images: Vec<(usize, GrayImage)> = match &cfg.dictionary.source {
                DictionarySource::Train => train
                    .iter()
                    .map(|&i| Ok((i, channel_image(&dataset.images[i], channel)?)))
                    .collect::<Result<_>>()?,
                DictionarySource::Noise => {
                    let probe = GrayImage::constant(cfg.image_size, cfg.image_size, 0.0)?;
                    let probe = channel_image(&probe, channel)?;
                    let (r, c) = window_count(&probe, cfg.patch_side, cfg.patch_stride);
                    let count = cfg.dictionary.patches.div_ceil((r * c).max(1)).max(1);
                    noise_images(count, cfg.image_size, derive_seed(seed, 0x30 + tag))?
                        .iter()
                        .enumerate()
                        .map(|(i, im)| Ok((i, channel_image(im, channel)?)))
                        .collect::<Result<_>>()?
                }
                DictionarySource::Manifest(path) => {
                    let ext = external.ok_or_else(|| {
                        Error::Config(format!("dictionary source {} was not loaded", path.display()))
                    })?;
                    ext.images
                        .iter()
                        .enumerate()
                        .map(|(i, im)| Ok((i, channel_image(im, channel)?)))
                        .collect::<Result<_>>()?
                }
            };
            let raw = sample_patches(
                &source_images,
                cfg.patch_side,
                cfg.patch_stride,
                cfg.dictionary.patches,
                derive_seed(seed, 0x10 + tag),
            )?;
            drop(source_images);
            let mut images: Vec<usize> = raw.sources.clone();
            images.dedup();
            let provenance = PatchProvenance {
                source: cfg.dictionary.source.to_string(),
                images,
                patches: raw.len(),
            };
            let normalized = contrast_normalize(&raw, cfg.norm_eps);
            let whitening = WhiteningModel::fit(&normalized, cfg.norm_eps, cfg.zca_eps)?;
            let whitened = whitening.apply(&normalized)?;
            let dictionary = build_dictionary(&whitened, &cfg.dictionary.params(derive_seed(seed, 0x20 + tag)))
                .map_err(|e| e.context(format!("{} dictionary for the {} channel", cfg.dictionary.method, channel.name())))?
                .with_whitening_id(whitening.fingerprint());
            let mut model = ChannelModel::new(channel, whitening, &dictionary, cfg.encoder)?;
            model.provenance = Some(provenance);
            channels.push(model);
        }
        Ok(Self {
            channels,
            patch_side: cfg.patch_side,
            patch_stride: cfg.patch_stride,
            pyramid: cfg.pyramid.clone(),
        })
    }

    pub fn encoder(&self) -> Encoder {
        self.channels[0].encoder()
    }

    /// Codes of one channel's patches, before pooling.
    pub fn channel_codes(&self, channel: usize, img: &GrayImage) -> Result<(CodeMap, (usize, usize))> {
        let model = &self.channels[channel];
        let ci = channel_image(img, model.channel)?;
        let patches = extract_patches(&ci, self.patch_side, self.patch_stride, 0)?;
        let x = model.whitening.preprocess(&patches)?;
        Ok((model.encoder.encode(&x)?, (ci.height(), ci.width())))
    }

    /// Fused pooled feature of one image, in channel order.
    pub fn features(&self, img: &GrayImage) -> Result<FeatureVector> {
        let parts = (0..self.channels.len())
            .map(|c| {
                let (codes, extent) = self.channel_codes(c, img)?;
                pool_pyramid(&codes, &self.pyramid, extent)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(fuse(&parts)?.0)
    }

    /// Single-precision features for many images, in input order.
    pub fn features_f32(&self, images: &[&GrayImage]) -> Result<Vec<Vec<f32>>> {
        images
            .par_iter()
            .map(|im| Ok(self.features(im)?.values.iter().map(|&v| v as f32).collect()))
            .collect()
    }

    pub fn feature_len(&self) -> usize {
        let k = self.encoder().code_dim(self.channels[0].dictionary().size());
        self.channels.len() * self.pyramid.feature_len(k)
    }

    /// Hash over whitening, dictionaries, encoder and pooling settings.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for c in &self.channels {
            h.update(c.channel.name().as_bytes());
            h.update(c.whitening.fingerprint().as_bytes());
            h.update(c.dictionary().fingerprint().as_bytes());
            h.update(c.encoder().to_string().as_bytes());
        }
        h.update(format!("{}|{}|{}", self.patch_side, self.patch_stride, self.pyramid).as_bytes());
        hex(&h.finalize()[..8])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sampling_matches_dense_extraction() {
        let a = GrayImage::from_fn(9, 8, |r, c| ((r * 9 + c) as f64) / 80.0).unwrap();
        let b = GrayImage::from_fn(7, 7, |r, c| ((r + 2 * c) as f64) / 30.0).unwrap();
        let images = vec![(4, a.clone()), (9, b.clone())];
        let all = sample_patches(&images, 3, 2, usize::MAX, 0).unwrap();
        let dense = PatchSet::concat(&[extract_patches(&a, 3, 2, 4).unwrap(), extract_patches(&b, 3, 2, 9).unwrap()]).unwrap();
        assert_eq!(all, dense);

        let some = sample_patches(&images, 3, 2, 5, 1).unwrap();
        assert_eq!(some.len(), 5);
        for i in 0..5 {
            let j = (0..dense.len())
                .find(|&j| dense.data.column(j) == some.data.column(i) && dense.coords[j] == some.coords[i])
                .expect("sampled patch exists densely");
            assert_eq!(dense.sources[j], some.sources[i]);
        }
        assert_eq!(some, sample_patches(&images, 3, 2, 5, 1).unwrap());
    }
}
