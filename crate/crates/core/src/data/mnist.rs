//! MNIST IDX format loader.
//!
//! Big-endian headers: images carry magic 0x00000803 and three dimension
//! words, labels 0x00000801 and one. The 28x28 grayscale digits are padded
//! with a zero border to 32x32 and replicated to three channels so the usual
//! patch sizes divide evenly.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::{Dataset, Split};

const IMAGES_MAGIC: u32 = 0x0000_0803;
const LABELS_MAGIC: u32 = 0x0000_0801;
const PADDED: usize = 32;

fn read_u32_be(bytes: &[u8], offset: usize, path: &Path) -> Result<u32> {
    let end = offset + 4;
    if end > bytes.len() {
        return Err(Error::Format {
            path: path.to_path_buf(),
            offset: Some(bytes.len() as u64),
            msg: "file ends inside the header".into(),
        });
    }
    Ok(u32::from_be_bytes(bytes[offset..end].try_into().unwrap()))
}

/// Decode one IDX image file to zero-padded 32x32x3 float images.
fn load_images(path: &Path) -> Result<(Vec<f32>, usize)> {
    let bytes = std::fs::read(path)?;
    let magic = read_u32_be(&bytes, 0, path)?;
    if magic != IMAGES_MAGIC {
        return Err(Error::Format {
            path: path.to_path_buf(),
            offset: Some(0),
            msg: format!("bad magic {magic:#010x}, expected {IMAGES_MAGIC:#010x}"),
        });
    }
    let n = read_u32_be(&bytes, 4, path)? as usize;
    let rows = read_u32_be(&bytes, 8, path)? as usize;
    let cols = read_u32_be(&bytes, 12, path)? as usize;
    if n == 0 {
        return Err(Error::Dataset(format!(
            "image file {} declares zero items",
            path.display()
        )));
    }
    if rows > PADDED || cols > PADDED {
        return Err(Error::Format {
            path: path.to_path_buf(),
            offset: Some(8),
            msg: format!("{rows}x{cols} images exceed the {PADDED}x{PADDED} frame"),
        });
    }
    let want = 16 + n * rows * cols;
    if bytes.len() != want {
        return Err(Error::Format {
            path: path.to_path_buf(),
            offset: Some(bytes.len() as u64),
            msg: format!("file length {}, header implies {want}", bytes.len()),
        });
    }
    let (py, px) = ((PADDED - rows) / 2, (PADDED - cols) / 2);
    let mut images = vec![0.0f32; n * PADDED * PADDED * 3];
    for i in 0..n {
        let src = &bytes[16 + i * rows * cols..16 + (i + 1) * rows * cols];
        let img = &mut images[i * PADDED * PADDED * 3..(i + 1) * PADDED * PADDED * 3];
        for r in 0..rows {
            for c in 0..cols {
                let v = src[r * cols + c] as f32 / 255.0;
                let base = ((py + r) * PADDED + (px + c)) * 3;
                img[base] = v;
                img[base + 1] = v;
                img[base + 2] = v;
            }
        }
    }
    Ok((images, n))
}

fn load_labels(path: &Path) -> Result<Vec<u8>> {
    let bytes = std::fs::read(path)?;
    let magic = read_u32_be(&bytes, 0, path)?;
    if magic != LABELS_MAGIC {
        return Err(Error::Format {
            path: path.to_path_buf(),
            offset: Some(0),
            msg: format!("bad magic {magic:#010x}, expected {LABELS_MAGIC:#010x}"),
        });
    }
    let n = read_u32_be(&bytes, 4, path)? as usize;
    if n == 0 {
        return Err(Error::Dataset(format!(
            "label file {} declares zero items",
            path.display()
        )));
    }
    if bytes.len() != 8 + n {
        return Err(Error::Format {
            path: path.to_path_buf(),
            offset: Some(bytes.len() as u64),
            msg: format!("file length {}, header implies {}", bytes.len(), 8 + n),
        });
    }
    let labels = bytes[8..].to_vec();
    if let Some(bad) = labels.iter().position(|&l| l >= 10) {
        return Err(Error::Format {
            path: path.to_path_buf(),
            offset: Some((8 + bad) as u64),
            msg: format!("label {} >= 10", labels[bad]),
        });
    }
    Ok(labels)
}

fn load_split(dir: &Path, prefix: &str, split: Split) -> Result<Dataset> {
    let images_path = dir.join(format!("{prefix}-images-idx3-ubyte"));
    let labels_path = dir.join(format!("{prefix}-labels-idx1-ubyte"));
    let (images, n) = load_images(&images_path)?;
    let labels = load_labels(&labels_path)?;
    if labels.len() != n {
        return Err(Error::Dataset(format!(
            "{prefix}: {n} images but {} labels",
            labels.len()
        )));
    }
    Ok(Dataset {
        images: Tensor::from_vec(&[n, PADDED, PADDED, 3], images)?,
        labels,
        num_classes: 10,
        split,
    })
}

/// Load `train-*` and `t10k-*` IDX files from a directory.
pub fn load_mnist(dir: &Path) -> Result<(Dataset, Dataset)> {
    let train = load_split(dir, "train", Split::Train)?;
    let test = load_split(dir, "t10k", Split::Test)?;
    Ok((train, test))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_images(path: &Path, n: u32, rows: u32, cols: u32, pixels: &[u8]) {
        let mut bytes = Vec::new();
        bytes.extend_from_slice(&IMAGES_MAGIC.to_be_bytes());
        bytes.extend_from_slice(&n.to_be_bytes());
        bytes.extend_from_slice(&rows.to_be_bytes());
        bytes.extend_from_slice(&cols.to_be_bytes());
        bytes.extend_from_slice(pixels);
        std::fs::write(path, bytes).unwrap();
    }

    fn write_labels(path: &Path, labels: &[u8]) {
        let mut bytes = Vec::new();
        bytes.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
        bytes.extend_from_slice(&(labels.len() as u32).to_be_bytes());
        bytes.extend_from_slice(labels);
        std::fs::write(path, bytes).unwrap();
    }

    #[test]
    fn one_image_fixture_decodes_to_expected_grid() {
        let dir = tempfile::tempdir().unwrap();
        // 2x2 image, distinct corners
        write_images(
            &dir.path().join("train-images-idx3-ubyte"),
            1,
            2,
            2,
            &[255, 0, 0, 128],
        );
        write_labels(&dir.path().join("train-labels-idx1-ubyte"), &[5]);
        write_images(
            &dir.path().join("t10k-images-idx3-ubyte"),
            1,
            2,
            2,
            &[0, 0, 0, 0],
        );
        write_labels(&dir.path().join("t10k-labels-idx1-ubyte"), &[0]);

        let (train, _) = load_mnist(dir.path()).unwrap();
        assert_eq!(train.len(), 1);
        assert_eq!(train.labels, vec![5]);
        let img = train.image(0);
        // 2x2 content centered in the 32x32 frame at (15, 15)
        assert_eq!(img.at(&[15, 15, 0]), 1.0);
        assert_eq!(img.at(&[15, 15, 1]), 1.0);
        assert_eq!(img.at(&[16, 16, 2]), 128.0 / 255.0);
        assert_eq!(img.at(&[0, 0, 0]), 0.0);
    }

    #[test]
    fn zero_items_is_empty_dataset_error() {
        let dir = tempfile::tempdir().unwrap();
        write_images(&dir.path().join("train-images-idx3-ubyte"), 0, 28, 28, &[]);
        write_labels(&dir.path().join("train-labels-idx1-ubyte"), &[1]);
        let err = load_split(dir.path(), "train", Split::Train).unwrap_err();
        assert!(matches!(err, Error::Dataset(_)), "{err:?}");
    }

    #[test]
    fn bad_magic_is_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("train-images-idx3-ubyte");
        std::fs::write(&path, [0u8, 0, 8, 4, 0, 0, 0, 1]).unwrap();
        let err = load_images(&path).unwrap_err();
        assert!(matches!(err, Error::Format { .. }), "{err:?}");
    }

    #[test]
    fn grayscale_replicated_across_channels() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("train-images-idx3-ubyte");
        write_images(&path, 1, 1, 1, &[200]);
        let (images, _) = load_images(&path).unwrap();
        let center = ((15 * 32) + 15) * 3;
        let v = 200.0 / 255.0;
        assert_eq!(&images[center..center + 3], &[v, v, v]);
    }
}
