//! CIFAR-10 binary batch format.
//!
//! A record is 3073 bytes: one label byte then 1024 red, 1024 green and 1024
//! blue plane bytes, each plane row-major 32x32. Canonical batch files hold
//! exactly 10000 records.

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::{Dataset, Split};

pub const CIFAR_RECORD_BYTES: usize = 3073;
pub const CIFAR_BATCH_BYTES: usize = 30_730_000;

const SIDE: usize = 32;
const PLANE: usize = SIDE * SIDE;

pub(crate) const TRAIN_FILES: [&str; 5] = [
    "data_batch_1.bin",
    "data_batch_2.bin",
    "data_batch_3.bin",
    "data_batch_4.bin",
    "data_batch_5.bin",
];
pub(crate) const TEST_FILE: &str = "test_batch.bin";

/// Parse one batch file of any whole number of records (fixtures may be a
/// single record; the canonical files are validated by [`load_cifar10`]).
pub fn load_batch_file(path: &Path) -> Result<(Vec<f32>, Vec<u8>)> {
    let bytes = std::fs::read(path)?;
    if bytes.is_empty() || bytes.len() % CIFAR_RECORD_BYTES != 0 {
        let offset = bytes.len() - bytes.len() % CIFAR_RECORD_BYTES;
        return Err(Error::Format {
            path: path.to_path_buf(),
            offset: Some(offset as u64),
            msg: format!(
                "file length {} is not a whole number of {CIFAR_RECORD_BYTES}-byte records",
                bytes.len()
            ),
        });
    }
    let n = bytes.len() / CIFAR_RECORD_BYTES;
    let mut images = vec![0.0f32; n * PLANE * 3];
    let mut labels = Vec::with_capacity(n);
    for r in 0..n {
        let rec = &bytes[r * CIFAR_RECORD_BYTES..(r + 1) * CIFAR_RECORD_BYTES];
        let label = rec[0];
        if label >= 10 {
            return Err(Error::Format {
                path: path.to_path_buf(),
                offset: Some((r * CIFAR_RECORD_BYTES) as u64),
                msg: format!("corrupt record {r}: label {label} >= 10"),
            });
        }
        labels.push(label);
        // planar RGB -> interleaved HWC
        let img = &mut images[r * PLANE * 3..(r + 1) * PLANE * 3];
        for p in 0..PLANE {
            for c in 0..3 {
                img[p * 3 + c] = rec[1 + c * PLANE + p] as f32 / 255.0;
            }
        }
    }
    Ok((images, labels))
}

fn resolve_dir(dir: &Path) -> PathBuf {
    let nested = dir.join("cifar-10-batches-bin");
    if nested.is_dir() {
        nested
    } else {
        dir.to_path_buf()
    }
}

/// Load the canonical six batch files (50000 train / 10000 test examples).
pub fn load_cifar10(dir: &Path) -> Result<(Dataset, Dataset)> {
    let dir = resolve_dir(dir);
    let load_canonical = |name: &str| -> Result<(Vec<f32>, Vec<u8>)> {
        let path = dir.join(name);
        let len = std::fs::metadata(&path)?.len();
        if len != CIFAR_BATCH_BYTES as u64 {
            return Err(Error::Format {
                path,
                offset: Some(len),
                msg: format!("batch file length {len}, expected {CIFAR_BATCH_BYTES}"),
            });
        }
        load_batch_file(&path)
    };

    let mut train_images = Vec::with_capacity(50_000 * PLANE * 3);
    let mut train_labels = Vec::with_capacity(50_000);
    for name in TRAIN_FILES {
        let (imgs, labels) = load_canonical(name)?;
        train_images.extend_from_slice(&imgs);
        train_labels.extend_from_slice(&labels);
    }
    let (test_images, test_labels) = load_canonical(TEST_FILE)?;

    let train = Dataset {
        images: Tensor::from_vec(&[train_labels.len(), SIDE, SIDE, 3], train_images)?,
        labels: train_labels,
        num_classes: 10,
        split: Split::Train,
    };
    let test = Dataset {
        images: Tensor::from_vec(&[test_labels.len(), SIDE, SIDE, 3], test_images)?,
        labels: test_labels,
        num_classes: 10,
        split: Split::Test,
    };
    Ok((train, test))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(label: u8, fill: u8) -> Vec<u8> {
        let mut rec = vec![fill; CIFAR_RECORD_BYTES];
        rec[0] = label;
        rec
    }

    #[test]
    fn single_record_fixture_decodes() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("one.bin");
        std::fs::write(&path, record(7, 255)).unwrap();
        let (images, labels) = load_batch_file(&path).unwrap();
        assert_eq!(labels, vec![7]);
        assert_eq!(images.len(), 3072);
        assert!(images.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn truncated_file_names_byte_offset() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.bin");
        let mut bytes = record(1, 0);
        bytes.extend_from_slice(&record(2, 0)[..100]); // 100 trailing bytes
        std::fs::write(&path, bytes).unwrap();
        let err = load_batch_file(&path).unwrap_err();
        match err {
            Error::Format { offset, .. } => assert_eq!(offset, Some(3073)),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn out_of_range_label_is_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("corrupt.bin");
        let mut bytes = record(3, 9);
        bytes.extend_from_slice(&record(10, 9));
        std::fs::write(&path, bytes).unwrap();
        let err = load_batch_file(&path).unwrap_err();
        match err {
            Error::Format { offset, msg, .. } => {
                assert_eq!(offset, Some(CIFAR_RECORD_BYTES as u64));
                assert!(msg.contains("label 10"), "{msg}");
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn planar_to_interleaved_layout() {
        // first pixel: R=10, G=20, B=30
        let mut rec = vec![0u8; CIFAR_RECORD_BYTES];
        rec[0] = 0;
        rec[1] = 10;
        rec[1 + PLANE] = 20;
        rec[1 + 2 * PLANE] = 30;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("layout.bin");
        std::fs::write(&path, rec).unwrap();
        let (images, _) = load_batch_file(&path).unwrap();
        assert_eq!(images[0], 10.0 / 255.0);
        assert_eq!(images[1], 20.0 / 255.0);
        assert_eq!(images[2], 30.0 / 255.0);
    }

    #[test]
    fn load_cifar10_rejects_short_batches() {
        let dir = tempfile::tempdir().unwrap();
        for name in TRAIN_FILES {
            std::fs::write(dir.path().join(name), record(0, 0)).unwrap();
        }
        std::fs::write(dir.path().join(TEST_FILE), record(0, 0)).unwrap();
        let err = load_cifar10(dir.path()).unwrap_err();
        assert!(matches!(err, Error::Format { .. }));
    }
}
