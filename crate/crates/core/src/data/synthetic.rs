//! Synthetic CIFAR-format corpus for demos and data-free testing.
//!
//! Writes the canonical six batch files (50000 train / 10000 test records) in
//! the exact binary layout, so the real loader is exercised end to end. Each
//! class is a smooth global pattern; samples add a random cyclic shift,
//! brightness scale and pixel noise, which a small Mixer separates quickly.

use std::path::Path;

use rand::Rng as _;

use crate::error::Result;
use crate::rng::{self, Rng};

use super::cifar10::{CIFAR_RECORD_BYTES, TEST_FILE, TRAIN_FILES};

const SIDE: usize = 32;
const PLANE: usize = SIDE * SIDE;
const CLASSES: usize = 10;

/// Smooth per-class prototype: a coarse 4x4 random grid per channel,
/// bilinearly upsampled to 32x32.
fn prototypes(rng: &mut Rng) -> Vec<[f32; PLANE * 3]> {
    (0..CLASSES)
        .map(|_| {
            let coarse: Vec<f32> = (0..4 * 4 * 3).map(|_| rng.random_range(0.0..255.0)).collect();
            let mut img = [0.0f32; PLANE * 3];
            for y in 0..SIDE {
                for x in 0..SIDE {
                    // coarse-cell coordinates with bilinear weights
                    let fy = y as f32 / SIDE as f32 * 3.0;
                    let fx = x as f32 / SIDE as f32 * 3.0;
                    let (y0, x0) = (fy as usize, fx as usize);
                    let (y1, x1) = ((y0 + 1).min(3), (x0 + 1).min(3));
                    let (wy, wx) = (fy - y0 as f32, fx - x0 as f32);
                    for c in 0..3 {
                        let g = |yy: usize, xx: usize| coarse[(yy * 4 + xx) * 3 + c];
                        let v = g(y0, x0) * (1.0 - wy) * (1.0 - wx)
                            + g(y0, x1) * (1.0 - wy) * wx
                            + g(y1, x0) * wy * (1.0 - wx)
                            + g(y1, x1) * wy * wx;
                        img[(y * SIDE + x) * 3 + c] = v;
                    }
                }
            }
            img
        })
        .collect()
}

fn render_record(label: u8, protos: &[[f32; PLANE * 3]], rng: &mut Rng, out: &mut [u8]) {
    let proto = &protos[label as usize];
    let dy = rng.random_range(0..SIDE);
    let dx = rng.random_range(0..SIDE);
    let scale: f32 = rng.random_range(0.75..1.25);
    out[0] = label;
    for y in 0..SIDE {
        for x in 0..SIDE {
            let sy = (y + dy) % SIDE;
            let sx = (x + dx) % SIDE;
            for c in 0..3 {
                let noise = rng.random_range(-20.0..20.0f32);
                let v = proto[(sy * SIDE + sx) * 3 + c] * scale + noise;
                // planar layout: label byte, then R, G, B planes
                out[1 + c * PLANE + y * SIDE + x] = v.clamp(0.0, 255.0) as u8;
            }
        }
    }
}

/// Exactly class-balanced label sequence in a deterministic shuffled order.
fn balanced_labels(n: usize, rng: &mut Rng) -> Vec<u8> {
    assert_eq!(n % CLASSES, 0);
    let mut labels: Vec<u8> = (0..n).map(|i| (i % CLASSES) as u8).collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        labels.swap(i, j);
    }
    labels
}

/// Write the six canonical batch files into `dir`. Deterministic in `seed`.
pub fn write_cifar10_dir(dir: &Path, seed: u64) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut rng = rng::stream(seed, 17);
    let protos = prototypes(&mut rng);

    let write_batch = |name: &str, n: usize, rng: &mut Rng| -> Result<()> {
        let labels = balanced_labels(n, rng);
        let mut bytes = vec![0u8; n * CIFAR_RECORD_BYTES];
        for (i, &label) in labels.iter().enumerate() {
            render_record(
                label,
                &protos,
                rng,
                &mut bytes[i * CIFAR_RECORD_BYTES..(i + 1) * CIFAR_RECORD_BYTES],
            );
        }
        std::fs::write(dir.join(name), bytes)?;
        Ok(())
    };

    for name in TRAIN_FILES {
        write_batch(name, 10_000, &mut rng)?;
    }
    write_batch(TEST_FILE, 10_000, &mut rng)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::load_cifar10;

    #[test]
    fn synthetic_corpus_loads_through_the_real_loader() {
        let dir = tempfile::tempdir().unwrap();
        write_cifar10_dir(dir.path(), 1234).unwrap();
        let (train, test) = load_cifar10(dir.path()).unwrap();
        assert_eq!(train.len(), 50_000);
        assert_eq!(test.len(), 10_000);
        // exactly uniform label histogram
        let mut hist = [0usize; 10];
        for &l in &train.labels {
            hist[l as usize] += 1;
        }
        assert!(hist.iter().all(|&c| c == 5_000), "{hist:?}");
        // pixel values decoded into [0, 1]
        assert!(train.images.data().iter().take(100_000).all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn generation_is_deterministic() {
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        write_cifar10_dir(d1.path(), 7).unwrap();
        write_cifar10_dir(d2.path(), 7).unwrap();
        let a = std::fs::read(d1.path().join("data_batch_1.bin")).unwrap();
        let b = std::fs::read(d2.path().join("data_batch_1.bin")).unwrap();
        assert_eq!(a, b);
    }
}
