//! Weight visualization: token-mixing hidden units and stem projection units
//! exported as binary PGM images.
//!
//! Units are sorted low-frequency first (frequency score: mean absolute
//! discrete spatial gradient of the unit's grid) and paired with their most
//! anti-correlated partner so opposing-phase kernels sit side by side.

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::model::{MixerConfig, MixerParams, TokenMlp};
use crate::scalar::Scalar;

/// Mean absolute horizontal+vertical neighbour difference over the grid.
pub fn frequency_score<T: Scalar>(grid: &[T], h: usize, w: usize) -> f64 {
    let mut total = 0.0f64;
    let mut count = 0usize;
    for y in 0..h {
        for x in 0..w {
            let v = grid[y * w + x].as_f64();
            if x + 1 < w {
                total += (grid[y * w + x + 1].as_f64() - v).abs();
                count += 1;
            }
            if y + 1 < h {
                total += (grid[(y + 1) * w + x].as_f64() - v).abs();
                count += 1;
            }
        }
    }
    if count == 0 {
        0.0
    } else {
        total / count as f64
    }
}

fn cosine<T: Scalar>(a: &[T], b: &[T]) -> f64 {
    let (mut dot, mut na, mut nb) = (0.0f64, 0.0f64, 0.0f64);
    for (x, y) in a.iter().zip(b) {
        let (x, y) = (x.as_f64(), y.as_f64());
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na.sqrt() * nb.sqrt())
    }
}

/// Emission order: ascending frequency, each unit immediately followed by its
/// most anti-correlated unpaired partner.
pub fn order_units<T: Scalar>(units: &[Vec<T>], h: usize, w: usize) -> Vec<usize> {
    let n = units.len();
    let mut by_freq: Vec<usize> = (0..n).collect();
    let scores: Vec<f64> = units.iter().map(|u| frequency_score(u, h, w)).collect();
    by_freq.sort_by(|&a, &b| {
        scores[a]
            .partial_cmp(&scores[b])
            .unwrap()
            .then(a.cmp(&b))
    });
    let mut emitted = vec![false; n];
    let mut order = Vec::with_capacity(n);
    for &u in &by_freq {
        if emitted[u] {
            continue;
        }
        emitted[u] = true;
        order.push(u);
        // most negative cosine among the rest
        let mut partner: Option<(usize, f64)> = None;
        for &v in &by_freq {
            if emitted[v] {
                continue;
            }
            let c = cosine(&units[u], &units[v]);
            if partner.map(|(_, pc)| c < pc).unwrap_or(true) {
                partner = Some((v, c));
            }
        }
        if let Some((v, _)) = partner {
            emitted[v] = true;
            order.push(v);
        }
    }
    order
}

/// Min-max normalize to 0..=255; constant grids map to mid-gray 128.
pub fn quantize<T: Scalar>(grid: &[T]) -> Vec<u8> {
    let lo = grid.iter().map(|v| v.as_f64()).fold(f64::INFINITY, f64::min);
    let hi = grid
        .iter()
        .map(|v| v.as_f64())
        .fold(f64::NEG_INFINITY, f64::max);
    if hi <= lo {
        return vec![128; grid.len()];
    }
    grid.iter()
        .map(|v| (((v.as_f64() - lo) / (hi - lo)) * 255.0).round() as u8)
        .collect()
}

/// Binary PGM (P5, maxval 255).
pub fn write_pgm(path: &Path, w: usize, h: usize, pixels: &[u8]) -> Result<()> {
    debug_assert_eq!(pixels.len(), w * h);
    let mut bytes = format!("P5\n{w} {h}\n255\n").into_bytes();
    bytes.extend_from_slice(pixels);
    std::fs::write(path, bytes)?;
    Ok(())
}

fn contact_sheet(tiles: &[Vec<u8>], tile_w: usize, tile_h: usize) -> (Vec<u8>, usize, usize) {
    let n = tiles.len();
    let per_row = (n as f64).sqrt().ceil() as usize;
    let rows = n.div_ceil(per_row);
    let (sheet_w, sheet_h) = (per_row * tile_w, rows * tile_h);
    let mut sheet = vec![0u8; sheet_w * sheet_h];
    for (i, tile) in tiles.iter().enumerate() {
        let (ty, tx) = (i / per_row, i % per_row);
        for y in 0..tile_h {
            let dst = (ty * tile_h + y) * sheet_w + tx * tile_w;
            sheet[dst..dst + tile_w].copy_from_slice(&tile[y * tile_w..(y + 1) * tile_w]);
        }
    }
    (sheet, sheet_w, sheet_h)
}

/// Export every hidden unit of one block's token-mixing MLP as
/// `block{b}_unit{idx:04}.pgm` plus the sheet `block{b}_sheet.pgm`.
/// Returns the written paths, units first, sheet last.
pub fn export_token_units<T: Scalar>(
    config: &MixerConfig,
    params: &MixerParams<T>,
    block_idx: usize,
    out_dir: &Path,
) -> Result<Vec<PathBuf>> {
    config.validate()?;
    let block = params.blocks.get(block_idx).ok_or_else(|| {
        Error::Contract(format!(
            "block {block_idx} out of range ({} blocks)",
            params.blocks.len()
        ))
    })?;
    let (w1, s) = match &block.token {
        TokenMlp::Tied { w1, .. } => (w1, config.sequence_length()?),
        _ => {
            return Err(Error::Unsupported(
                "token-unit export is defined for the standard variant".into(),
            ))
        }
    };
    let (gh, gw) = (config.grid_h(), config.grid_w());
    debug_assert_eq!(gh * gw, s);
    let d_s = w1.shape()[0];
    let units: Vec<Vec<T>> = (0..d_s).map(|u| w1.data()[u * s..(u + 1) * s].to_vec()).collect();
    let order = order_units(&units, gh, gw);

    std::fs::create_dir_all(out_dir)?;
    let mut paths = Vec::with_capacity(d_s + 1);
    let mut tiles = Vec::with_capacity(d_s);
    for (idx, &u) in order.iter().enumerate() {
        let pixels = quantize(&units[u]);
        let path = out_dir.join(format!("block{block_idx}_unit{idx:04}.pgm"));
        write_pgm(&path, gw, gh, &pixels)?;
        paths.push(path);
        tiles.push(pixels);
    }
    let (sheet, sw, sh) = contact_sheet(&tiles, gw, gh);
    let sheet_path = out_dir.join(format!("block{block_idx}_sheet.pgm"));
    write_pgm(&sheet_path, sw, sh, &sheet)?;
    paths.push(sheet_path);
    Ok(paths)
}

/// Export every stem projection unit (one per hidden channel) as
/// `stem_unit{idx:04}.pgm` plus `stem_sheet.pgm`: each column of the stem
/// matrix reshaped to the patch, channel-averaged to grayscale.
pub fn export_stem_units<T: Scalar>(
    config: &MixerConfig,
    params: &MixerParams<T>,
    out_dir: &Path,
) -> Result<Vec<PathBuf>> {
    config.validate()?;
    let p = config.patch;
    let ch = config.image.channels;
    let c = config.hidden_c;
    let stem = &params.stem_w; // [ch*P^2, C]

    std::fs::create_dir_all(out_dir)?;
    let mut paths = Vec::with_capacity(c + 1);
    let mut tiles = Vec::with_capacity(c);
    for unit in 0..c {
        let mut gray = vec![T::zero(); p * p];
        for (pix, g) in gray.iter_mut().enumerate() {
            let mut acc = T::zero();
            for cc in 0..ch {
                acc = acc + stem.data()[(pix * ch + cc) * c + unit];
            }
            *g = acc / T::of_f64(ch as f64);
        }
        let pixels = quantize(&gray);
        let path = out_dir.join(format!("stem_unit{unit:04}.pgm"));
        write_pgm(&path, p, p, &pixels)?;
        paths.push(path);
        tiles.push(pixels);
    }
    let (sheet, sw, sh) = contact_sheet(&tiles, p, p);
    let sheet_path = out_dir.join("stem_sheet.pgm");
    write_pgm(&sheet_path, sw, sh, &sheet)?;
    paths.push(sheet_path);
    Ok(paths)
}
