//! Weight-space transforms.
//!
//! Two families: permutation maps that rewrite weights so the model computes
//! the same function on permuted inputs, and the block-diagonal expansion
//! that adapts pre-trained token-mixing MLPs to a higher input resolution.

use crate::error::{Error, Result};
use crate::model::{block_split_order, MixerConfig, MixerParams, TokenMlp};
use crate::rng::{self, Rng};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Input permutations. Every member is a gather map (`out[i] = in[perm[i]]`);
/// `None` means identity.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PermSpec {
    /// Permutation of the S patch slots.
    pub token_perm: Option<Vec<usize>>,
    /// Permutation of the ch*P^2 positions inside a patch, shared across patches.
    pub pixel_perm: Option<Vec<usize>>,
    /// Permutation of the whole flattened image. No weight transform exists
    /// for this one; it is a data pipeline only.
    pub global_perm: Option<Vec<usize>>,
}

impl PermSpec {
    pub fn identity() -> Self {
        PermSpec {
            token_perm: None,
            pixel_perm: None,
            global_perm: None,
        }
    }

    pub fn is_identity(&self) -> bool {
        self.token_perm.is_none() && self.pixel_perm.is_none() && self.global_perm.is_none()
    }

    /// Random patch-pipeline spec (token + pixel permutations).
    pub fn random_patch(config: &MixerConfig, rng: &mut Rng) -> Result<Self> {
        let s = config.sequence_length()?;
        Ok(PermSpec {
            token_perm: Some(rng::permutation(s, rng)),
            pixel_perm: Some(rng::permutation(config.patch_dim(), rng)),
            global_perm: None,
        })
    }

    /// Random global-pixel-shuffle spec.
    pub fn random_global(config: &MixerConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let n = config.image.h * config.image.w * config.image.channels;
        Ok(PermSpec {
            token_perm: None,
            pixel_perm: None,
            global_perm: Some(rng::permutation(n, rng)),
        })
    }

    /// The spec that undoes this one.
    pub fn inverse(&self) -> Self {
        PermSpec {
            token_perm: self.token_perm.as_deref().map(invert_permutation),
            pixel_perm: self.pixel_perm.as_deref().map(invert_permutation),
            global_perm: self.global_perm.as_deref().map(invert_permutation),
        }
    }

    fn check(&self, config: &MixerConfig) -> Result<()> {
        let s = config.sequence_length()?;
        if let Some(p) = &self.token_perm {
            check_permutation(p, s, "token_perm")?;
        }
        if let Some(p) = &self.pixel_perm {
            check_permutation(p, config.patch_dim(), "pixel_perm")?;
        }
        if let Some(p) = &self.global_perm {
            let n = config.image.h * config.image.w * config.image.channels;
            check_permutation(p, n, "global_perm")?;
        }
        Ok(())
    }
}

pub fn invert_permutation(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

fn check_permutation(perm: &[usize], n: usize, what: &str) -> Result<()> {
    if perm.len() != n {
        return Err(Error::Contract(format!(
            "{what} has length {}, expected {n}",
            perm.len()
        )));
    }
    let mut seen = vec![false; n];
    for &p in perm {
        if p >= n || seen[p] {
            return Err(Error::Contract(format!("{what} is not a bijection")));
        }
        seen[p] = true;
    }
    Ok(())
}

/// Apply the input pipelines of a [`PermSpec`] to an `[H, W, ch]` image or a
/// `[B, H, W, ch]` batch: first patch shuffling with the shared within-patch
/// pixel permutation, then the global pixel shuffle.
pub fn permute_input<T: Scalar>(
    config: &MixerConfig,
    images: &Tensor<T>,
    spec: &PermSpec,
) -> Result<Tensor<T>> {
    spec.check(config)?;
    let (h, w, ch) = (config.image.h, config.image.w, config.image.channels);
    match images.shape() {
        [ih, iw, ic] | [_, ih, iw, ic] if [*ih, *iw, *ic] == [h, w, ch] => {}
        other => return Err(Error::shape("permute_input", other, &[h, w, ch])),
    }
    let n = h * w * ch;
    let mut map: Vec<usize> = (0..n).collect();

    if spec.token_perm.is_some() || spec.pixel_perm.is_some() {
        let s = config.sequence_length()?;
        let identity_tok: Vec<usize> = (0..s).collect();
        let identity_pix: Vec<usize> = (0..config.patch_dim()).collect();
        let tok = spec.token_perm.as_deref().unwrap_or(&identity_tok);
        let pix = spec.pixel_perm.as_deref().unwrap_or(&identity_pix);
        let p = config.patch;
        let gw = config.grid_w();
        // flattened-patch position -> image offset within the patch origin
        let in_patch_offset = |q: usize| {
            let (pyx, c) = (q / ch, q % ch);
            let (py, px) = (pyx / p, pyx % p);
            (py * w + px) * ch + c
        };
        for (t_out, &t_src) in tok.iter().enumerate() {
            let (or_, oc) = (t_out / gw, t_out % gw);
            let (sr, sc) = (t_src / gw, t_src % gw);
            let out_base = (or_ * p) * w * ch + (oc * p) * ch;
            let src_base = (sr * p) * w * ch + (sc * p) * ch;
            for (q_out, &q_src) in pix.iter().enumerate() {
                map[out_base + in_patch_offset(q_out)] = src_base + in_patch_offset(q_src);
            }
        }
    }
    if let Some(gp) = &spec.global_perm {
        // compose: out[i] = mid[gp[i]] = in[map[gp[i]]]
        map = gp.iter().map(|&i| map[i]).collect();
    }

    let batch = images.numel() / n;
    let mut data = Vec::with_capacity(images.numel());
    for b in 0..batch {
        let src = &images.data()[b * n..(b + 1) * n];
        data.extend(map.iter().map(|&i| src[i]));
    }
    Tensor::from_vec(images.shape(), data)
}

/// Rewrite weights so that `forward(permute_input(x))` with the new weights
/// equals `forward(x)` with the old ones: per block `w1' = w1 P^T`,
/// `w2' = P w2`, `b2' = P b2` for the token permutation matrix `P`, and stem
/// rows gathered by the pixel permutation.
pub fn permute_weights<T: Scalar>(
    config: &MixerConfig,
    params: &MixerParams<T>,
    spec: &PermSpec,
) -> Result<MixerParams<T>> {
    if !config.variant.is_standard() {
        return Err(Error::Unsupported(
            "permute_weights is defined for the standard variant only".into(),
        ));
    }
    if spec.global_perm.is_some() {
        return Err(Error::Unsupported(
            "no weight transform exists for a global pixel permutation".into(),
        ));
    }
    spec.check(config)?;
    let mut out = params.clone();

    if let Some(pix) = &spec.pixel_perm {
        // stem_w'[q, :] = stem_w[pix[q], :]
        let c = config.hidden_c;
        let idx: Vec<usize> = pix
            .iter()
            .flat_map(|&q| q * c..(q + 1) * c)
            .collect();
        out.stem_w = params.stem_w.remap_slab(2, &idx, params.stem_w.shape())?;
    }

    if let Some(tok) = &spec.token_perm {
        let s = tok.len();
        for block in &mut out.blocks {
            let TokenMlp::Tied { w1, w2, b2, .. } = &mut block.token else {
                unreachable!("standard variant is tied");
            };
            // w1' columns gathered by tok
            let d_s = w1.shape()[0];
            let w1_idx: Vec<usize> = (0..d_s)
                .flat_map(|a| tok.iter().map(move |&j| a * s + j))
                .collect();
            *w1 = w1.remap_slab(2, &w1_idx, w1.shape())?;
            // w2' rows gathered by tok
            let w2_idx: Vec<usize> = tok
                .iter()
                .flat_map(|&j| j * d_s..(j + 1) * d_s)
                .collect();
            *w2 = w2.remap_slab(2, &w2_idx, w2.shape())?;
            // b2' gathered by tok
            *b2 = b2.remap_slab(1, tok, b2.shape())?;
        }
    }
    Ok(out)
}

/// Resolution-expansion plan: sequence grows to K^2 * S, consumed as K^2
/// raster-ordered sub-grids; `order_map[t]` is the raster-index feeding
/// output slot `t`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExpandSpec {
    pub k: usize,
    pub order_map: Vec<usize>,
}

impl ExpandSpec {
    pub fn new(config: &MixerConfig, k: usize) -> Result<Self> {
        config.validate()?;
        if k < 1 {
            return Err(Error::Config("expansion factor must be >= 1".into()));
        }
        Ok(ExpandSpec {
            k,
            order_map: block_split_order(k, config.grid_h(), config.grid_w()),
        })
    }
}

/// Block-diagonal weight expansion for fine-tuning at resolution `(K*H, K*W)`:
/// each token-mixing matrix becomes K^2 copies of itself on the diagonal and
/// its biases tile K^2 times; everything else is copied unchanged. The new
/// model consumes tokens in block-split order.
pub fn expand_for_resolution<T: Scalar>(
    config: &MixerConfig,
    params: &MixerParams<T>,
    k: usize,
) -> Result<(MixerConfig, MixerParams<T>)> {
    config.validate()?;
    if k < 1 {
        return Err(Error::Config("expansion factor must be >= 1".into()));
    }
    if !config.variant.is_standard() {
        return Err(Error::Unsupported(
            "expand_for_resolution is defined for the standard variant only".into(),
        ));
    }
    if config.expand_factor != 1 {
        return Err(Error::Unsupported(
            "model was already expanded; repeated expansion is not supported".into(),
        ));
    }
    if k == 1 {
        return Ok((config.clone(), params.clone()));
    }
    let s = config.sequence_length()?;
    let d_s = config.mlp_d_s;
    let kk = k * k;

    let mut new_config = config.clone();
    new_config.image.h *= k;
    new_config.image.w *= k;
    new_config.mlp_d_s *= kk;
    new_config.expand_factor = k;
    new_config.validate()?;

    let mut new_params = params.clone();
    for block in &mut new_params.blocks {
        let TokenMlp::Tied { w1, b1, w2, b2 } = &mut block.token else {
            unreachable!("standard variant is tied");
        };
        *w1 = block_diagonal(w1, kk, d_s, s)?;
        *w2 = block_diagonal(w2, kk, s, d_s)?;
        *b1 = tile(b1, kk)?;
        *b2 = tile(b2, kk)?;
    }
    Ok((new_config, new_params))
}

fn block_diagonal<T: Scalar>(m: &Tensor<T>, copies: usize, r: usize, c: usize) -> Result<Tensor<T>> {
    debug_assert_eq!(m.shape(), &[r, c]);
    let mut out = Tensor::zeros(&[copies * r, copies * c]);
    let stride = copies * c;
    for g in 0..copies {
        for i in 0..r {
            let dst = (g * r + i) * stride + g * c;
            out.data_mut()[dst..dst + c].copy_from_slice(&m.data()[i * c..(i + 1) * c]);
        }
    }
    Ok(out)
}

fn tile<T: Scalar>(v: &Tensor<T>, copies: usize) -> Result<Tensor<T>> {
    let n = v.numel();
    let mut data = Vec::with_capacity(n * copies);
    for _ in 0..copies {
        data.extend_from_slice(v.data());
    }
    Tensor::from_vec(&[n * copies], data)
}

/// Reorder a raster-ordered token table `[.., S', C]` into block-split order
/// (K x K sub-grids of the `base_gh x base_gw` grid, each raster-ordered).
pub fn reorder_tokens_block_split<T: Scalar>(
    seq: &Tensor<T>,
    k: usize,
    base_gh: usize,
    base_gw: usize,
) -> Result<Tensor<T>> {
    let s_new = k * k * base_gh * base_gw;
    let (_, s, c) = seq.leading_rows_cols()?;
    if s != s_new {
        return Err(Error::Contract(format!(
            "sequence length {s} != K^2 * base grid = {s_new}"
        )));
    }
    let order = block_split_order(k, base_gh, base_gw);
    let idx: Vec<usize> = order.iter().flat_map(|&t| t * c..(t + 1) * c).collect();
    seq.remap_slab(2, &idx, &[s, c])
}

/// Inverse of [`reorder_tokens_block_split`].
pub fn reorder_tokens_raster<T: Scalar>(
    seq: &Tensor<T>,
    k: usize,
    base_gh: usize,
    base_gw: usize,
) -> Result<Tensor<T>> {
    let (_, s, c) = seq.leading_rows_cols()?;
    let order = invert_permutation(&block_split_order(k, base_gh, base_gw));
    let idx: Vec<usize> = order.iter().flat_map(|&t| t * c..(t + 1) * c).collect();
    seq.remap_slab(2, &idx, &[s, c])
}
