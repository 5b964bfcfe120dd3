//! Dataset ingestion and input pipelines.

mod cifar10;
mod mnist;
pub mod synthetic;

pub use cifar10::{load_batch_file, load_cifar10, CIFAR_BATCH_BYTES, CIFAR_RECORD_BYTES};
pub use mnist::load_mnist;

use crate::error::{Error, Result};
use crate::model::MixerConfig;
use crate::rng::{self, Rng};
use crate::surgery::PermSpec;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

/// Decoded image classification dataset; pixel values lie in [0, 1].
#[derive(Debug, Clone)]
pub struct Dataset {
    /// `[N, H, W, ch]`
    pub images: Tensor<f32>,
    pub labels: Vec<u8>,
    pub num_classes: usize,
    pub split: Split,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_dims(&self) -> (usize, usize, usize) {
        let s = self.images.shape();
        (s[1], s[2], s[3])
    }

    /// Copy of one image as an `[H, W, ch]` tensor.
    pub fn image(&self, i: usize) -> Tensor<f32> {
        let (h, w, ch) = self.image_dims();
        let n = h * w * ch;
        Tensor::from_vec(&[h, w, ch], self.images.data()[i * n..(i + 1) * n].to_vec())
            .expect("image slice matches dims")
    }

    /// First `n` examples, as a smaller dataset (desk-scale subsetting).
    pub fn take(&self, n: usize) -> Result<Dataset> {
        if n == 0 || n > self.len() {
            return Err(Error::Dataset(format!(
                "cannot take {n} of {} examples",
                self.len()
            )));
        }
        let (h, w, ch) = self.image_dims();
        Ok(Dataset {
            images: Tensor::from_vec(
                &[n, h, w, ch],
                self.images.data()[..n * h * w * ch].to_vec(),
            )?,
            labels: self.labels[..n].to_vec(),
            num_classes: self.num_classes,
            split: self.split,
        })
    }

    /// Gather an image batch `[B, H, W, ch]` by index.
    pub fn batch(&self, indices: &[usize]) -> Tensor<f32> {
        let (h, w, ch) = self.image_dims();
        let n = h * w * ch;
        let mut data = Vec::with_capacity(indices.len() * n);
        for &i in indices {
            data.extend_from_slice(&self.images.data()[i * n..(i + 1) * n]);
        }
        Tensor::from_vec(&[indices.len(), h, w, ch], data).expect("batch assembly")
    }

    pub fn labels_at(&self, indices: &[usize]) -> Vec<u8> {
        indices.iter().map(|&i| self.labels[i]).collect()
    }
}

/// Fixed input normalization: [0,1] -> [-1,1].
pub fn normalize(images: &Tensor<f32>) -> Tensor<f32> {
    images.map(|v| 2.0 * v - 1.0)
}

pub fn one_hot(labels: &[u8], num_classes: usize) -> Tensor<f32> {
    let mut data = vec![0.0f32; labels.len() * num_classes];
    for (i, &l) in labels.iter().enumerate() {
        data[i * num_classes + l as usize] = 1.0;
    }
    Tensor::from_vec(&[labels.len(), num_classes], data).expect("one-hot assembly")
}

/// Deterministic core of [`augment`]: optional horizontal flip, then a crop
/// of the reflect-padded image at offset `(dy, dx)`, both in `0..=2*PAD`.
/// `(false, PAD, PAD)` is the identity.
pub const AUGMENT_PAD: usize = 4;

pub fn augment_with(image: &Tensor<f32>, flip: bool, dy: usize, dx: usize) -> Tensor<f32> {
    let (h, w, ch) = (image.shape()[0], image.shape()[1], image.shape()[2]);
    let pad = AUGMENT_PAD;
    assert!(dy <= 2 * pad && dx <= 2 * pad);
    // reflect index into 0..n for a padded coordinate (no edge repeat)
    let reflect = |i: isize, n: usize| -> usize {
        let n = n as isize;
        let mut i = i;
        while i < 0 || i >= n {
            if i < 0 {
                i = -i;
            }
            if i >= n {
                i = 2 * (n - 1) - i;
            }
        }
        i as usize
    };
    let mut out = vec![0.0f32; h * w * ch];
    for y in 0..h {
        let sy = reflect(y as isize + dy as isize - pad as isize, h);
        for x in 0..w {
            let x_src = if flip { w - 1 - x } else { x };
            let sx = reflect(x_src as isize + dx as isize - pad as isize, w);
            let src = (sy * w + sx) * ch;
            let dst = (y * w + x) * ch;
            out[dst..dst + ch].copy_from_slice(&image.data()[src..src + ch]);
        }
    }
    Tensor::from_vec(image.shape(), out).expect("augment preserves shape")
}

/// Training augmentation: horizontal flip with probability 1/2, then a random
/// crop from the reflect-padded image.
pub fn augment(image: &Tensor<f32>, rng: &mut Rng) -> Tensor<f32> {
    let flip = rand::Rng::random::<f64>(rng) < 0.5;
    let dy = rand::Rng::random_range(rng, 0..=2 * AUGMENT_PAD);
    let dx = rand::Rng::random_range(rng, 0..=2 * AUGMENT_PAD);
    augment_with(image, flip, dy, dx)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PermKind {
    None,
    Patch,
    Global,
}

impl PermKind {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "none" => Some(PermKind::None),
            "patch" => Some(PermKind::Patch),
            "global" => Some(PermKind::Global),
            _ => None,
        }
    }
}

/// Fixed input permutation shared across all images, derived from a seed.
pub fn build_perm_pipeline(
    kind: PermKind,
    config: &MixerConfig,
    seed: u64,
) -> Result<PermSpec> {
    let mut rng = rng::stream(seed, 7);
    match kind {
        PermKind::None => Ok(PermSpec::identity()),
        PermKind::Patch => PermSpec::random_patch(config, &mut rng),
        PermKind::Global => PermSpec::random_global(config, &mut rng),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn test_image() -> Tensor<f32> {
        let mut r = rng::seeded(3);
        rng::uniform_tensor::<f32>(&[32, 32, 3], 0.0, 1.0, &mut r)
    }

    #[test]
    fn centered_crop_no_flip_is_identity() {
        let img = test_image();
        let out = augment_with(&img, false, AUGMENT_PAD, AUGMENT_PAD);
        assert!(out.bit_eq(&img));
    }

    #[test]
    fn double_flip_is_identity() {
        let img = test_image();
        let once = augment_with(&img, true, AUGMENT_PAD, AUGMENT_PAD);
        let twice = augment_with(&once, true, AUGMENT_PAD, AUGMENT_PAD);
        assert!(twice.bit_eq(&img));
    }

    #[test]
    fn flip_preserves_pixel_multiset() {
        let img = test_image();
        let out = augment_with(&img, true, AUGMENT_PAD, AUGMENT_PAD);
        let mut a: Vec<u32> = img.data().iter().map(|v| v.to_bits()).collect();
        let mut b: Vec<u32> = out.data().iter().map(|v| v.to_bits()).collect();
        a.sort_unstable();
        b.sort_unstable();
        assert_eq!(a, b);
    }

    #[test]
    fn perm_pipeline_none_is_identity() {
        let cfg = crate::model::MixerConfig::named("tiny-cifar").unwrap();
        let spec = build_perm_pipeline(PermKind::None, &cfg, 5).unwrap();
        assert!(spec.is_identity());
    }

    #[test]
    fn perm_pipeline_deterministic_in_seed() {
        let cfg = crate::model::MixerConfig::named("tiny-cifar").unwrap();
        let a = build_perm_pipeline(PermKind::Patch, &cfg, 5).unwrap();
        let b = build_perm_pipeline(PermKind::Patch, &cfg, 5).unwrap();
        assert_eq!(a, b);
        let c = build_perm_pipeline(PermKind::Patch, &cfg, 6).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn patch_perm_preserves_per_patch_histograms() {
        // patch pipeline scrambles patch positions and pixels within patches;
        // the multiset of per-patch value multisets is unchanged.
        let cfg = crate::model::MixerConfig::named("tiny-cifar").unwrap();
        let img = test_image();
        let spec = build_perm_pipeline(PermKind::Patch, &cfg, 11).unwrap();
        let out = crate::surgery::permute_input(&cfg, &img, &spec).unwrap();

        let patch_histograms = |t: &Tensor<f32>| -> Vec<Vec<u32>> {
            let mut hs = Vec::new();
            for gy in 0..8 {
                for gx in 0..8 {
                    let mut h = Vec::new();
                    for py in 0..4 {
                        for px in 0..4 {
                            for c in 0..3 {
                                h.push(t.at(&[gy * 4 + py, gx * 4 + px, c]).to_bits());
                            }
                        }
                    }
                    h.sort_unstable();
                    hs.push(h);
                }
            }
            hs.sort();
            hs
        };
        assert_eq!(patch_histograms(&img), patch_histograms(&out));
        // and the image as a whole is measure-preserving
        let mut a: Vec<u32> = img.data().iter().map(|v| v.to_bits()).collect();
        let mut b: Vec<u32> = out.data().iter().map(|v| v.to_bits()).collect();
        a.sort_unstable();
        b.sort_unstable();
        assert_eq!(a, b);
    }

    #[test]
    fn one_hot_rows_sum_to_one() {
        let t = one_hot(&[0, 3, 9], 10);
        for row in t.data().chunks(10) {
            assert_eq!(row.iter().sum::<f32>(), 1.0);
        }
        assert_eq!(t.at(&[1, 3]), 1.0);
    }

    #[test]
    fn normalize_range() {
        let img = test_image();
        let n = normalize(&img);
        assert!(n.data().iter().all(|&v| (-1.0..=1.0).contains(&v)));
        assert_eq!(n.data()[0], 2.0 * img.data()[0] - 1.0);
    }
}
