//! Basic 3x3 local binary pattern code images and feature-channel fusion.

use crate::dataio::GrayImage;
use crate::pooling::FeatureVector;
use crate::{Error, Result};

// neighbour offsets clockwise from the top-left; bit i <-> OFFSETS[i]
const OFFSETS: [(isize, isize); 8] = [(-1, -1), (-1, 0), (-1, 1), (0, 1), (1, 1), (1, 0), (1, -1), (0, -1)];

/// 8-bit code of interior pixel `(r, c)`: bit set iff neighbour >= center.
pub fn lbp_code(img: &GrayImage, r: usize, c: usize) -> u8 {
    let center = img.get(r, c);
    let mut code = 0u8;
    for (bit, (dr, dc)) in OFFSETS.iter().enumerate() {
        let v = img.get((r as isize + dr) as usize, (c as isize + dc) as usize);
        if v >= center {
            code |= 1 << bit;
        }
    }
    code
}

/// Code image of size `(H-2) x (W-2)` with codes rescaled to `[0, 1]`.
pub fn lbp_code_image(img: &GrayImage) -> Result<GrayImage> {
    let (h, w) = (img.height(), img.width());
    if h < 3 || w < 3 {
        return Err(Error::Dimension(format!("LBP needs at least 3x3, got {w}x{h}")));
    }
    let mut values = Vec::with_capacity((h - 2) * (w - 2));
    for r in 1..h - 1 {
        for c in 1..w - 1 {
            values.push(lbp_code(img, r, c) as f64 / 255.0);
        }
    }
    GrayImage::new(w - 2, h - 2, values)
}

/// Channel-order concatenation, with the offsets at which each channel starts.
pub fn fuse(channels: &[FeatureVector]) -> Result<(FeatureVector, Vec<usize>)> {
    if channels.is_empty() {
        return Err(Error::Validation("nothing to fuse".into()));
    }
    let mut offsets = Vec::with_capacity(channels.len());
    let mut values = Vec::with_capacity(channels.iter().map(FeatureVector::len).sum());
    for ch in channels {
        offsets.push(values.len());
        values.extend_from_slice(&ch.values);
    }
    let code_dim = if channels.len() == 1 { channels[0].code_dim } else { 0 };
    Ok((FeatureVector { values, code_dim }, offsets))
}

/// Inverse of [`fuse`].
pub fn split_fused(fused: &FeatureVector, offsets: &[usize]) -> Vec<Vec<f64>> {
    let mut ends: Vec<usize> = offsets.iter().skip(1).copied().collect();
    ends.push(fused.len());
    offsets
        .iter()
        .zip(ends)
        .map(|(&s, e)| fused.values[s..e].to_vec())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn constant_image_is_all_ones() {
        let img = GrayImage::constant(6, 5, 0.4).unwrap();
        let out = lbp_code_image(&img).unwrap();
        assert_eq!((out.width(), out.height()), (4, 3));
        assert!(out.values().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn bright_center_is_zero() {
        let img = GrayImage::from_fn(3, 3, |r, c| if (r, c) == (1, 1) { 1.0 } else { 0.0 }).unwrap();
        assert_eq!(lbp_code_image(&img).unwrap().values(), &[0.0]);
    }

    #[test]
    fn matches_naive_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let img = GrayImage::from_fn(5, 5, |_, _| (rng.random_range(0..4) as f64) / 4.0).unwrap();
        let out = lbp_code_image(&img).unwrap();
        for r in 1..4 {
            for c in 1..4 {
                let center = img.get(r, c);
                let ring = [
                    img.get(r - 1, c - 1),
                    img.get(r - 1, c),
                    img.get(r - 1, c + 1),
                    img.get(r, c + 1),
                    img.get(r + 1, c + 1),
                    img.get(r + 1, c),
                    img.get(r + 1, c - 1),
                    img.get(r, c - 1),
                ];
                let code: u32 = ring
                    .iter()
                    .enumerate()
                    .map(|(i, &v)| if v >= center { 1u32 << i } else { 0 })
                    .sum();
                assert_eq!(out.get(r - 1, c - 1), code as f64 / 255.0);
            }
        }
    }

    #[test]
    fn too_small() {
        let img = GrayImage::constant(2, 9, 0.0).unwrap();
        assert!(matches!(lbp_code_image(&img), Err(Error::Dimension(_))));
    }

    #[test]
    fn fusion_round_trip() {
        let a = FeatureVector {
            values: vec![1.0, 2.0, 3.0],
            code_dim: 3,
        };
        let b = FeatureVector {
            values: vec![-0.5, 0.25],
            code_dim: 2,
        };
        let (one, _) = fuse(std::slice::from_ref(&a)).unwrap();
        assert_eq!(one, a);
        let (f, offsets) = fuse(&[a.clone(), b.clone()]).unwrap();
        assert_eq!(f.len(), 5);
        let parts = split_fused(&f, &offsets);
        assert_eq!(parts, vec![a.values, b.values]);
        assert!(fuse(&[]).is_err());
    }
}
