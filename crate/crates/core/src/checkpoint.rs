//! Checkpoint persistence.
//!
//! Layout: an 8-byte little-endian header length, the JSON header, then the
//! body of concatenated little-endian f32 blobs in header order. Offsets are
//! body-relative, strictly increasing and contiguous. The header contains no
//! volatile fields, so saving is a pure function of the contents and
//! round-trips are byte-identical.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{MixerConfig, MixerParams};
use crate::tensor::Tensor;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorRecord {
    name: String,
    dtype: String,
    shape: Vec<usize>,
    byte_offset: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    schema_version: u32,
    config: MixerConfig,
    step: u64,
    tensors: Vec<TensorRecord>,
}

/// A trained (or fresh) model with everything needed to resume evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: MixerConfig,
    /// Stored at f32 regardless of compute precision.
    pub params: MixerParams<f32>,
    pub step: u64,
}

pub fn save(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let mut tensors = Vec::new();
    let mut body: Vec<u8> = Vec::new();
    ckpt.params.visit(|name, t| {
        tensors.push(TensorRecord {
            name,
            dtype: "f32".to_string(),
            shape: t.shape().to_vec(),
            byte_offset: body.len() as u64,
        });
        for v in t.data() {
            body.extend_from_slice(&v.to_le_bytes());
        }
    });
    let header = Header {
        schema_version: SCHEMA_VERSION,
        config: ckpt.config.clone(),
        step: ckpt.step,
        tensors,
    };
    let header_bytes = serde_json::to_vec(&header)?;

    let mut file = std::fs::File::create(path)?;
    file.write_all(&(header_bytes.len() as u64).to_le_bytes())?;
    file.write_all(&header_bytes)?;
    file.write_all(&body)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let mut file = std::fs::File::open(path)?;
    let mut len_bytes = [0u8; 8];
    file.read_exact(&mut len_bytes).map_err(|_| Error::Format {
        path: path.to_path_buf(),
        offset: Some(0),
        msg: "file shorter than the 8-byte header length prefix".into(),
    })?;
    let header_len = u64::from_le_bytes(len_bytes) as usize;
    let mut header_bytes = vec![0u8; header_len];
    file.read_exact(&mut header_bytes).map_err(|_| Error::Format {
        path: path.to_path_buf(),
        offset: Some(8),
        msg: format!("header claims {header_len} bytes, file is shorter"),
    })?;
    let header: Header = serde_json::from_slice(&header_bytes)?;
    if header.schema_version != SCHEMA_VERSION {
        return Err(Error::Format {
            path: path.to_path_buf(),
            offset: Some(8),
            msg: format!(
                "schema version {} unsupported (expected {SCHEMA_VERSION})",
                header.schema_version
            ),
        });
    }
    let mut body = Vec::new();
    file.read_to_end(&mut body)?;

    // validate offsets: contiguous, increasing, covering the body exactly
    let mut cursor = 0u64;
    for rec in &header.tensors {
        if rec.byte_offset != cursor {
            return Err(Error::Format {
                path: path.to_path_buf(),
                offset: Some(8 + header_len as u64 + rec.byte_offset),
                msg: format!(
                    "tensor {} at offset {}, expected contiguous {cursor}",
                    rec.name, rec.byte_offset
                ),
            });
        }
        if rec.dtype != "f32" {
            return Err(Error::Format {
                path: path.to_path_buf(),
                offset: Some(8 + header_len as u64 + rec.byte_offset),
                msg: format!("tensor {} has dtype {}, expected f32", rec.name, rec.dtype),
            });
        }
        let numel: usize = rec.shape.iter().product();
        cursor += 4 * numel as u64;
    }
    if cursor != body.len() as u64 {
        return Err(Error::Format {
            path: path.to_path_buf(),
            offset: Some(8 + header_len as u64 + cursor.min(body.len() as u64)),
            msg: format!("body is {} bytes, tensors claim {cursor}", body.len()),
        });
    }

    let read_tensor = |rec: &TensorRecord| -> Result<Tensor<f32>> {
        let numel: usize = rec.shape.iter().product();
        let start = rec.byte_offset as usize;
        let data: Vec<f32> = body[start..start + 4 * numel]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        Tensor::from_vec(&rec.shape, data)
    };

    let params = MixerParams::from_named(&header.config, |name| {
        header
            .tensors
            .iter()
            .find(|r| r.name == name)
            .and_then(|r| read_tensor(r).ok())
    })?;

    Ok(Checkpoint {
        config: header.config,
        params,
        step: header.step,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_params;

    fn sample() -> Checkpoint {
        let config = MixerConfig::named("toy").unwrap();
        let params = init_params::<f32>(&config, 42).unwrap();
        Checkpoint {
            config,
            params,
            step: 123,
        }
    }

    #[test]
    fn roundtrip_is_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.ckpt");
        let p2 = dir.path().join("b.ckpt");
        let ckpt = sample();
        save(&ckpt, &p1).unwrap();
        let loaded = load(&p1).unwrap();
        assert_eq!(loaded.step, 123);
        assert_eq!(loaded.config, ckpt.config);
        for (a, b) in ckpt.params.flatten().iter().zip(loaded.params.flatten()) {
            assert!(a.bit_eq(b));
        }
        save(&loaded, &p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn truncated_body_is_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.ckpt");
        save(&sample(), &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 10]).unwrap();
        assert!(matches!(load(&path), Err(Error::Format { .. })));
    }

    #[test]
    fn header_length_prefix_is_le_u64() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("h.ckpt");
        save(&sample(), &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let len = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
        let header: serde_json::Value = serde_json::from_slice(&bytes[8..8 + len]).unwrap();
        assert_eq!(header["schema_version"], 1);
        assert!(header["tensors"].as_array().unwrap().len() > 2);
        assert_eq!(header["tensors"][0]["byte_offset"], 0);
    }
}
