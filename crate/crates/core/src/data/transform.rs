use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::Dataset;
use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::rng::Rng;

const STD_FLOOR: f64 = 1e-6;

/// Per-channel mean and standard deviation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormStats {
    /// Statistics of `ds` (meant to be the training split). Standard
    /// deviations are floored at 1e-6.
    pub fn from_dataset(ds: &Dataset) -> Result<Self> {
        if ds.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let [c, h, w] = ds.image_shape();
        let plane = h * w;
        let count = (ds.len() * plane) as f64;
        let data = ds.images.data();
        let mut mean = vec![0.0; c];
        let mut std = vec![0.0; c];
        for ch in 0..c {
            let vals = (0..ds.len()).flat_map(|i| {
                let base = (i * c + ch) * plane;
                data[base..base + plane].iter()
            });
            let m = vals.clone().sum::<f64>() / count;
            let var = vals.map(|v| (v - m) * (v - m)).sum::<f64>() / count;
            mean[ch] = m;
            std[ch] = var.sqrt().max(STD_FLOOR);
        }
        Ok(Self { mean, std })
    }

    pub fn identity(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            std: vec![1.0; channels],
        }
    }

    pub fn apply(&self, images: &Tensor) -> Tensor {
        let s = images.shape();
        let (c, plane) = (s[1], s[2] * s[3]);
        let out = images
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let ch = (i / plane) % c;
                (v - self.mean[ch]) / self.std[ch]
            })
            .collect();
        Tensor::from_vec(s, out)
    }
}

/// Normalizes `ds` with `stats`, which must come from the training split.
pub fn normalize(ds: &Dataset, stats: &NormStats) -> Result<Dataset> {
    if ds.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if stats.mean.len() != ds.image_shape()[0] {
        return Err(Error::Contract(format!(
            "normalization stats cover {} channels, dataset has {}",
            stats.mean.len(),
            ds.image_shape()[0]
        )));
    }
    let mut out = ds.clone();
    out.images = stats.apply(&ds.images);
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub crop: bool,
    pub pad: usize,
    pub flip: bool,
    pub flip_prob: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            crop: true,
            pad: 4,
            flip: true,
            flip_prob: 0.5,
        }
    }
}

impl AugmentConfig {
    pub fn none() -> Self {
        Self {
            crop: false,
            pad: 0,
            flip: false,
            flip_prob: 0.0,
        }
    }

    pub fn is_identity(&self) -> bool {
        (!self.crop || self.pad == 0) && (!self.flip || self.flip_prob == 0.0)
    }
}

/// Random crop of the zero-padded image plus random horizontal flip.
pub fn augment(batch: &Tensor, cfg: &AugmentConfig, rng: &mut Rng) -> Tensor {
    if cfg.is_identity() {
        return batch.clone();
    }
    let s = batch.shape();
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let pad = if cfg.crop { cfg.pad } else { 0 };
    let src = batch.data();
    let mut out = vec![0.0; src.len()];
    for i in 0..n {
        let (dy, dx) = if pad > 0 {
            (rng.gen_range(0..=2 * pad), rng.gen_range(0..=2 * pad))
        } else {
            (pad, pad)
        };
        let flip = cfg.flip && rng.gen::<f64>() < cfg.flip_prob;
        for ch in 0..c {
            let base = (i * c + ch) * h * w;
            for y in 0..h {
                // row y of the crop is row y + dy - pad of the original
                let sy = (y + dy) as isize - pad as isize;
                if sy < 0 || sy >= h as isize {
                    continue;
                }
                for x in 0..w {
                    let ox = if flip { w - 1 - x } else { x };
                    let sx = (x + dx) as isize - pad as isize;
                    if sx < 0 || sx >= w as isize {
                        continue;
                    }
                    out[base + y * w + ox] = src[base + sy as usize * w + sx as usize];
                }
            }
        }
    }
    Tensor::from_vec(s, out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_synthetic, Split, SyntheticKind};
    use crate::rng;

    fn image_batch() -> Tensor {
        Tensor::from_vec(&[2, 2, 3, 4], (0..48).map(|v| v as f64 / 48.0).collect())
    }

    #[test]
    fn constant_channel_normalizes_to_zero() {
        let images = Tensor::full(&[4, 1, 2, 2], 0.3);
        let ds = Dataset::new("c", Split::Train, images, vec![0; 4], 1).unwrap();
        let stats = NormStats::from_dataset(&ds).unwrap();
        assert_eq!(stats.std, vec![STD_FLOOR]);
        let out = normalize(&ds, &stats).unwrap();
        assert!(out.images.data().iter().all(|&v| v.abs() < 1e-9));
    }

    #[test]
    fn train_split_mean_is_zero_after_normalization() {
        let ds = gen_synthetic(SyntheticKind::Spirals, 200, 0.1, 4).unwrap();
        let stats = NormStats::from_dataset(&ds).unwrap();
        let out = normalize(&ds, &stats).unwrap();
        let m = out.images.sum() / out.images.numel() as f64;
        assert!(m.abs() < 1e-10);
        // the test split uses the training statistics
        let test = gen_synthetic(SyntheticKind::Spirals, 100, 0.1, 5).unwrap();
        let t = normalize(&test, &stats).unwrap();
        assert_eq!(t.images, stats.apply(&test.images));
    }

    #[test]
    fn no_op_augmentation_is_identity() {
        let b = image_batch();
        let cfg = AugmentConfig {
            crop: true,
            pad: 0,
            flip: true,
            flip_prob: 0.0,
        };
        assert_eq!(augment(&b, &cfg, &mut rng::stream(0, "aug", 0)), b);
    }

    #[test]
    fn forced_flip_is_an_involution() {
        let b = image_batch();
        let cfg = AugmentConfig {
            crop: false,
            pad: 0,
            flip: true,
            flip_prob: 1.0,
        };
        let mut r = rng::stream(0, "aug", 0);
        let once = augment(&b, &cfg, &mut r);
        assert_ne!(once, b);
        assert_eq!(once.data()[0], b.data()[3]);
        assert_eq!(augment(&once, &cfg, &mut r), b);
    }

    #[test]
    fn crop_keeps_shape_and_range() {
        let b = image_batch();
        let mut r = rng::stream(3, "aug", 0);
        for _ in 0..20 {
            let out = augment(&b, &AugmentConfig::default(), &mut r);
            assert_eq!(out.shape(), b.shape());
            assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }
}
