//! In-memory image datasets, normalization and augmentation.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng;
use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{stream, Purpose};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// Images stored as `u8` in HWC order, one after another.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dataset {
    pub split: Split,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub num_classes: usize,
    images: Vec<u8>,
    labels: Vec<u8>,
}

impl Dataset {
    pub fn new(
        split: Split,
        [height, width, channels]: [usize; 3],
        num_classes: usize,
        images: Vec<u8>,
        labels: Vec<u8>,
    ) -> Result<Self> {
        let per = height * width * channels;
        if per == 0 || images.len() != per * labels.len() {
            return Err(Error::InvalidArgument(format!(
                "{} image bytes do not match {} labels of {height}x{width}x{channels}",
                images.len(),
                labels.len()
            )));
        }
        if let Some(i) = labels.iter().position(|&l| l as usize >= num_classes) {
            return Err(Error::InvalidArgument(format!(
                "label {} at index {i} is outside [0, {num_classes})",
                labels[i]
            )));
        }
        Ok(Self {
            split,
            height,
            width,
            channels,
            num_classes,
            images,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_len(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub fn image(&self, i: usize) -> &[u8] {
        let n = self.image_len();
        &self.images[i * n..(i + 1) * n]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i] as usize
    }

    pub fn images(&self) -> &[u8] {
        &self.images
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    /// Per-sample tensor shape `[C, H, W]`.
    pub fn sample_shape(&self) -> [usize; 3] {
        [self.channels, self.height, self.width]
    }

    /// Samples `range` as a new dataset with the given split tag.
    pub fn slice(&self, range: core::ops::Range<usize>, split: Split) -> Self {
        let n = self.image_len();
        Self {
            split,
            images: self.images[range.start * n..range.end * n].to_vec(),
            labels: self.labels[range].to_vec(),
            ..*self
        }
    }

    /// Splits off the last `n` samples as a validation set.
    pub fn split_validation(&self, n: usize) -> (Self, Self) {
        let cut = self.len().saturating_sub(n);
        (self.slice(0..cut, self.split), self.slice(cut..self.len(), Split::Val))
    }

    /// Permutation of all indices for `epoch`.
    pub fn shuffled_indices(&self, seed: u64, epoch: u64) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(&mut stream(seed, Purpose::Shuffle, epoch, 0));
        idx
    }

    /// Normalized NCHW batch of the samples at `indices`. With `augment`,
    /// each sample draws its crop and flip from a stream keyed by
    /// `(seed, epoch, sample index)`.
    pub fn batch<T: Scalar>(
        &self,
        indices: &[usize],
        norm: &Normalization,
        augment_key: Option<(u64, u64)>,
    ) -> (Tensor<T>, Vec<usize>) {
        let (c, h, w) = (self.channels, self.height, self.width);
        let mut data = Vec::with_capacity(indices.len() * c * h * w);
        let mut labels = Vec::with_capacity(indices.len());
        let scale: Vec<f64> = norm.std.iter().map(|s| 1.0 / (255.0 * s)).collect();
        let offset: Vec<f64> = norm.mean.iter().zip(&norm.std).map(|(m, s)| m / s).collect();
        let mut buf;
        for &i in indices {
            let img = match augment_key {
                Some((seed, epoch)) => {
                    let mut rng = stream(seed, Purpose::Augment, epoch, i as u64);
                    buf = augment(self.image(i), [h, w, c], &mut rng);
                    &buf[..]
                }
                None => self.image(i),
            };
            for ch in 0..c {
                for p in 0..h * w {
                    let v = img[p * c + ch] as f64;
                    data.push(T::from_f64(v * scale[ch] - offset[ch]));
                }
            }
            labels.push(self.label(i));
        }
        (Tensor::new(vec![indices.len(), c, h, w], data).unwrap(), labels)
    }
}

/// Per-channel mean and std of pixel values scaled to `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalization {
    pub fn compute(data: &Dataset) -> Self {
        let c = data.channels;
        let mut sum = vec![0u64; c];
        let mut sq = vec![0u64; c];
        for (k, &v) in data.images.iter().enumerate() {
            sum[k % c] += v as u64;
            sq[k % c] += (v as u64) * (v as u64);
        }
        let n = (data.images.len() / c) as f64;
        let mut mean = vec![0.0; c];
        let mut std = vec![0.0; c];
        for ch in 0..c {
            let m = sum[ch] as f64 / n;
            let var = sq[ch] as f64 / n - m * m;
            mean[ch] = m / 255.0;
            std[ch] = Float::sqrt(var.max(0.0)) / 255.0;
            if std[ch] == 0.0 {
                std[ch] = 1.0;
            }
        }
        Self { mean, std }
    }

    pub fn identity(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            std: vec![1.0; channels],
        }
    }

    pub fn check(&self, channels: usize) -> Result<()> {
        if self.mean.len() != channels || self.std.len() != channels {
            return Err(Error::Config(format!("normalization must have {channels} channels")));
        }
        if self.std.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::Config(String::from("normalization std must be positive")));
        }
        Ok(())
    }
}

pub const AUGMENT_PAD: usize = 4;

/// Zero-pads by [`AUGMENT_PAD`], crops back to the original size at offset
/// `(dy, dx)` in the padded image, then mirrors horizontally if `flip`.
pub fn augment_with(image: &[u8], [h, w, c]: [usize; 3], dy: usize, dx: usize, flip: bool) -> Vec<u8> {
    let p = AUGMENT_PAD as isize;
    let mut out = vec![0u8; h * w * c];
    for y in 0..h {
        let sy = y as isize + dy as isize - p;
        if sy < 0 || sy >= h as isize {
            continue;
        }
        for x in 0..w {
            let ox = if flip { w - 1 - x } else { x };
            let sx = x as isize + dx as isize - p;
            if sx < 0 || sx >= w as isize {
                continue;
            }
            let src = (sy as usize * w + sx as usize) * c;
            let dst = (y * w + ox) * c;
            out[dst..dst + c].copy_from_slice(&image[src..src + c]);
        }
    }
    out
}

/// Random crop offset in `0..=2*pad` on each axis and a fair-coin flip.
pub fn augment(image: &[u8], dims: [usize; 3], rng: &mut impl Rng) -> Vec<u8> {
    let dy = rng.random_range(0..=2 * AUGMENT_PAD);
    let dx = rng.random_range(0..=2 * AUGMENT_PAD);
    let flip = rng.random_bool(0.5);
    augment_with(image, dims, dy, dx, flip)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn img() -> Vec<u8> {
        (0..(5 * 6 * 3)).map(|v| v as u8).collect()
    }

    #[test]
    fn identity_crop_and_flip_involution() {
        let x = img();
        assert_eq!(augment_with(&x, [5, 6, 3], 4, 4, false), x);
        let f = augment_with(&x, [5, 6, 3], 4, 4, true);
        assert_ne!(f, x);
        assert_eq!(augment_with(&f, [5, 6, 3], 4, 4, true), x);
    }

    #[test]
    fn shifted_crop_pads_with_zeros() {
        let x = vec![7u8; 4];
        let y = augment_with(&x, [2, 2, 1], 0, 0, false);
        assert_eq!(y, vec![0; 4]);
        let y = augment_with(&x, [2, 2, 1], 3, 4, false);
        assert_eq!(y, vec![0, 0, 7, 7]);
    }

    #[test]
    fn crop_offsets_are_uniform() {
        let mut counts = [[0u32; 9]; 9];
        let mut rng = stream(5, Purpose::Augment, 0, 0);
        let n = 10_000;
        for _ in 0..n {
            let dy = rng.random_range(0..=8usize);
            let dx = rng.random_range(0..=8usize);
            counts[dy][dx] += 1;
        }
        let e = n as f64 / 81.0;
        let chi2: f64 = counts
            .iter()
            .flatten()
            .map(|&o| {
                let d = o as f64 - e;
                d * d / e
            })
            .sum();
        // 80 degrees of freedom; 99.9% quantile is about 124.8
        assert!(chi2 < 124.8, "chi2 = {chi2}");
    }

    #[test]
    fn dataset_validation_and_batches() {
        assert!(Dataset::new(Split::Train, [2, 2, 1], 10, vec![0; 7], vec![1, 2]).is_err());
        assert!(Dataset::new(Split::Train, [2, 2, 1], 2, vec![0; 8], vec![1, 2]).is_err());
        let d = Dataset::new(Split::Train, [2, 2, 1], 10, vec![0, 255, 0, 255, 255, 255, 255, 255], vec![3, 4]).unwrap();
        let norm = Normalization::compute(&d);
        assert_eq!(norm.mean, vec![0.75]);
        let (x, y) = d.batch::<f64>(&[1, 0], &norm, None);
        assert_eq!(x.shape(), &[2, 1, 2, 2]);
        assert_eq!(y, vec![4, 3]);
        let s = norm.std[0];
        assert!((x.data()[0] - 0.25 / s).abs() < 1e-12);
        let (tr, val) = d.split_validation(1);
        assert_eq!((tr.len(), val.len(), val.split), (1, 1, Split::Val));
        let p = d.shuffled_indices(1, 0);
        let mut q = p.clone();
        q.sort();
        assert_eq!(q, vec![0, 1]);
        assert_eq!(p, d.shuffled_indices(1, 0));
    }
}
