//! Graph construction for the Mixer forward pass.
//!
//! A layer first mixes tokens per channel (acting on columns of the S x C
//! table through its transpose), then mixes channels per token (acting on
//! rows), each around a skip connection:
//!
//!   U = X + (W2 gelu(W1 LayerNorm(X)^T + b1) + b2)^T
//!   Y = U + gelu(LayerNorm(U) W3^T + b3) W4^T + b4

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::model::config::{MixerConfig, Variant};
use crate::model::params::{MixerParams, TokenMlp};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const LAYER_NORM_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Train,
    Eval,
}

/// Parameter leaves bound into a graph, in the same layout as [`MixerParams`].
pub struct GraphParams {
    pub stem_w: NodeId,
    pub stem_b: NodeId,
    pub blocks: Vec<GraphBlock>,
    pub prehead_gamma: NodeId,
    pub prehead_beta: NodeId,
    pub head_w: NodeId,
    pub head_b: NodeId,
}

pub struct GraphBlock {
    pub ln1_gamma: NodeId,
    pub ln1_beta: NodeId,
    pub token: GraphTokenMlp,
    pub ln2_gamma: NodeId,
    pub ln2_beta: NodeId,
    pub w3: NodeId,
    pub b3: NodeId,
    pub w4: NodeId,
    pub b4: NodeId,
}

pub struct GraphTokenMlp {
    pub proj: Option<NodeId>,
    pub w1: NodeId,
    pub b1: NodeId,
    pub w2: NodeId,
    pub b2: NodeId,
}

/// Register every parameter as a named trainable leaf.
pub fn bind_params<T: Scalar>(g: &mut Graph<T>, params: &MixerParams<T>) -> GraphParams {
    let mut ids = Vec::new();
    params.visit(|name, t| ids.push(g.param(&name, t.clone())));
    let mut it = ids.into_iter();
    let mut next = || it.next().expect("canonical order covers all leaves");
    let stem_w = next();
    let stem_b = next();
    let blocks = params
        .blocks
        .iter()
        .map(|b| {
            let ln1_gamma = next();
            let ln1_beta = next();
            let token = {
                let proj = matches!(b.token, TokenMlp::GroupedViews { .. }).then(&mut next);
                GraphTokenMlp {
                    proj,
                    w1: next(),
                    b1: next(),
                    w2: next(),
                    b2: next(),
                }
            };
            GraphBlock {
                ln1_gamma,
                ln1_beta,
                token,
                ln2_gamma: next(),
                ln2_beta: next(),
                w3: next(),
                b3: next(),
                w4: next(),
                b4: next(),
            }
        })
        .collect();
    GraphParams {
        stem_w,
        stem_b,
        blocks,
        prehead_gamma: next(),
        prehead_beta: next(),
        head_w: next(),
        head_b: next(),
    }
}

/// Token consumption order after a resolution expansion: the raster sequence
/// over the enlarged grid regrouped as K x K sub-grids, each raster-ordered.
/// Entry `t` is the raster index feeding output position `t`.
pub fn block_split_order(k: usize, base_gh: usize, base_gw: usize) -> Vec<usize> {
    let s_base = base_gh * base_gw;
    let full_gw = k * base_gw;
    let mut order = Vec::with_capacity(k * k * s_base);
    for block in 0..k * k {
        let (bi, bj) = (block / k, block % k);
        for u in 0..s_base {
            let (ur, uc) = (u / base_gw, u % base_gw);
            let row = bi * base_gh + ur;
            let col = bj * base_gw + uc;
            order.push(row * full_gw + col);
        }
    }
    order
}

/// Extract flattened patches in the model's token order. Accepts `[H, W, ch]`
/// or `[B, H, W, ch]`; returns `[S, ch*P^2]` or `[B, S, ch*P^2]`.
pub fn patchify<T: Scalar>(config: &MixerConfig, images: &Tensor<T>) -> Result<Tensor<T>> {
    config.validate()?;
    let (h, w, ch) = (config.image.h, config.image.w, config.image.channels);
    let (batched, b) = match images.shape() {
        [ih, iw, ic] if [*ih, *iw, *ic] == [h, w, ch] => (false, 1),
        [b, ih, iw, ic] if [*ih, *iw, *ic] == [h, w, ch] => (true, *b),
        other => {
            return Err(Error::shape("patchify", other, &[h, w, ch]));
        }
    };
    let p = config.patch;
    let (gh, gw) = (config.grid_h(), config.grid_w());
    let s = gh * gw;
    let pd = config.patch_dim();

    let order: Vec<usize> = if config.expand_factor > 1 {
        let k = config.expand_factor;
        block_split_order(k, gh / k, gw / k)
    } else {
        (0..s).collect()
    };

    let mut data = Vec::with_capacity(b * s * pd);
    for bi in 0..b {
        let img = &images.data()[bi * h * w * ch..(bi + 1) * h * w * ch];
        for &src in &order {
            let (gr, gc) = (src / gw, src % gw);
            for py in 0..p {
                let row = (gr * p + py) * w * ch;
                let start = row + gc * p * ch;
                data.extend_from_slice(&img[start..start + p * ch]);
            }
        }
    }
    let shape: Vec<usize> = if batched {
        vec![b, s, pd]
    } else {
        vec![s, pd]
    };
    Tensor::from_vec(&shape, data)
}

/// Patch extraction followed by the shared stem projection (tensor-level).
pub fn patchify_embed<T: Scalar>(
    config: &MixerConfig,
    image: &Tensor<T>,
    params: &MixerParams<T>,
) -> Result<Tensor<T>> {
    let patches = patchify(config, image)?;
    let mut tokens = patches.matmul(&params.stem_w)?;
    let c = params.stem_b.numel();
    for row in tokens.data_mut().chunks_mut(c) {
        for (o, &b) in row.iter_mut().zip(params.stem_b.data()) {
            *o = *o + b;
        }
    }
    Ok(tokens)
}

/// Regularization state threaded through block construction.
struct Reg<'r> {
    phase: Phase,
    drop_rate: f64,
    stoch_depth: f64,
    total_branches: usize,
    branch_idx: usize,
    rng: Option<&'r mut Rng>,
}

impl<'r> Reg<'r> {
    fn dropout<T: Scalar>(&mut self, g: &mut Graph<T>, x: NodeId) -> Result<NodeId> {
        if self.phase == Phase::Eval || self.drop_rate == 0.0 {
            return Ok(x);
        }
        let rng = self.rng.as_mut().expect("checked at forward entry");
        let keep = 1.0 - self.drop_rate;
        let scale = T::of_f64(1.0 / keep);
        let shape = g.value(x).shape().to_vec();
        let n: usize = shape.iter().product();
        let mask: Vec<T> = (0..n)
            .map(|_| {
                if rand::Rng::random::<f64>(rng) < keep {
                    scale
                } else {
                    T::zero()
                }
            })
            .collect();
        g.mul_mask(x, Tensor::from_vec(&shape, mask)?)
    }

    /// Per-sample residual-branch drop with linearly ramped probability.
    fn stoch_branch<T: Scalar>(&mut self, g: &mut Graph<T>, x: NodeId) -> Result<NodeId> {
        let idx = self.branch_idx;
        self.branch_idx += 1;
        if self.phase == Phase::Eval || self.stoch_depth == 0.0 {
            return Ok(x);
        }
        let ramp = if self.total_branches > 1 {
            idx as f64 / (self.total_branches - 1) as f64
        } else {
            1.0
        };
        let p_drop = self.stoch_depth * ramp;
        let keep = 1.0 - p_drop;
        let rng = self.rng.as_mut().expect("checked at forward entry");
        let shape = g.value(x).shape().to_vec();
        let slab: usize = shape[shape.len() - 2..].iter().product();
        let lead: usize = shape.iter().product::<usize>() / slab;
        let mut mask = Vec::with_capacity(lead * slab);
        for _ in 0..lead {
            let v = if p_drop > 0.0 && rand::Rng::random::<f64>(rng) >= keep {
                T::zero()
            } else {
                T::of_f64(1.0 / keep)
            };
            mask.extend(std::iter::repeat(v).take(slab));
        }
        g.mul_mask(x, Tensor::from_vec(&shape, mask)?)
    }
}

fn token_mix<T: Scalar>(
    g: &mut Graph<T>,
    config: &MixerConfig,
    block: &GraphBlock,
    ln: NodeId,
    reg: &mut Reg,
) -> Result<NodeId> {
    let s = config.sequence_length()?;
    let c = config.hidden_c;
    match config.variant {
        Variant::Standard => {
            let t = g.transpose(ln)?; // [.., C, S]
            let w1t = g.transpose(block.token.w1)?; // [S, D_S]
            let h = g.matmul(t, w1t)?;
            let h = g.add_bias(h, block.token.b1)?;
            let h = g.gelu(h);
            let h = reg.dropout(g, h)?;
            let w2t = g.transpose(block.token.w2)?; // [D_S, S]
            let o = g.matmul(h, w2t)?;
            let o = g.add_bias(o, block.token.b2)?;
            let o = reg.dropout(g, o)?;
            g.transpose(o)
        }
        Variant::UntiedToken => {
            let t = g.transpose(ln)?; // [.., C, S]
            let w1t = g.transpose(block.token.w1)?; // [C, S, D_S]
            let h = g.bmm(t, w1t)?;
            let h = g.add_bias(h, block.token.b1)?;
            let h = g.gelu(h);
            let h = reg.dropout(g, h)?;
            let w2t = g.transpose(block.token.w2)?; // [C, D_S, S]
            let o = g.bmm(h, w2t)?;
            let o = g.add_bias(o, block.token.b2)?;
            let o = reg.dropout(g, o)?;
            g.transpose(o)
        }
        Variant::Grouped(gr) => {
            let grouped = g.remap(ln, group_forward_index(s, c, gr), 2, &[s * gr, c / gr])?;
            let mixed = grouped_mix(g, block, grouped, reg)?;
            g.remap(mixed, group_inverse_index(s, c, gr), 2, &[s, c])
        }
        Variant::GroupedViews(gr) => {
            let proj = block.token.proj.expect("grouped_views binds proj");
            let viewed = g.matmul(ln, proj)?; // [.., S, C], view g in columns g*C/G..
            let grouped = g.remap(
                viewed,
                views_forward_index(s, c, gr),
                2,
                &[s * gr, c / gr],
            )?;
            let mixed = grouped_mix(g, block, grouped, reg)?;
            g.remap(mixed, views_inverse_index(s, c, gr), 2, &[s, c])
        }
    }
}

/// Tied token MLP applied to a (possibly regrouped) table.
fn grouped_mix<T: Scalar>(
    g: &mut Graph<T>,
    block: &GraphBlock,
    x: NodeId,
    reg: &mut Reg,
) -> Result<NodeId> {
    let t = g.transpose(x)?;
    let w1t = g.transpose(block.token.w1)?;
    let h = g.matmul(t, w1t)?;
    let h = g.add_bias(h, block.token.b1)?;
    let h = g.gelu(h);
    let h = reg.dropout(g, h)?;
    let w2t = g.transpose(block.token.w2)?;
    let o = g.matmul(h, w2t)?;
    let o = g.add_bias(o, block.token.b2)?;
    let o = reg.dropout(g, o)?;
    g.transpose(o)
}

/// Columns of the grouped table concatenate G neighbouring channels:
/// `out[g*S + s, j] = x[s, j*G + g]`.
fn group_forward_index(s: usize, c: usize, g: usize) -> Vec<usize> {
    let cg = c / g;
    let mut idx = Vec::with_capacity(s * c);
    for gi in 0..g {
        for si in 0..s {
            for j in 0..cg {
                idx.push(si * c + j * g + gi);
            }
        }
    }
    idx
}

fn group_inverse_index(s: usize, c: usize, g: usize) -> Vec<usize> {
    let cg = c / g;
    let mut idx = Vec::with_capacity(s * c);
    for si in 0..s {
        for ch in 0..c {
            let (j, gi) = (ch / g, ch % g);
            idx.push((gi * s + si) * cg + j);
        }
    }
    idx
}

/// View projections sit side by side: view g occupies columns
/// `g*C/G .. (g+1)*C/G` of the projected table.
fn views_forward_index(s: usize, c: usize, g: usize) -> Vec<usize> {
    let cg = c / g;
    let mut idx = Vec::with_capacity(s * c);
    for gi in 0..g {
        for si in 0..s {
            for j in 0..cg {
                idx.push(si * c + gi * cg + j);
            }
        }
    }
    idx
}

fn views_inverse_index(s: usize, c: usize, g: usize) -> Vec<usize> {
    let cg = c / g;
    let mut idx = Vec::with_capacity(s * c);
    for si in 0..s {
        for ch in 0..c {
            let (gi, j) = (ch / cg, ch % cg);
            idx.push((gi * s + si) * cg + j);
        }
    }
    idx
}

/// One Mixer layer on an `[.., S, C]` table.
fn mixer_block_inner<T: Scalar>(
    g: &mut Graph<T>,
    config: &MixerConfig,
    block: &GraphBlock,
    x: NodeId,
    reg: &mut Reg,
) -> Result<NodeId> {
    let eps = T::of_f64(LAYER_NORM_EPS);
    // token mixing
    let ln = g.layer_norm(x, block.ln1_gamma, block.ln1_beta, eps)?;
    let mixed = token_mix(g, config, block, ln, reg)?;
    let mixed = reg.stoch_branch(g, mixed)?;
    let u = g.add(x, mixed)?;
    // channel mixing
    let ln2 = g.layer_norm(u, block.ln2_gamma, block.ln2_beta, eps)?;
    let w3t = g.transpose(block.w3)?; // [C, D_C]
    let h = g.matmul(ln2, w3t)?;
    let h = g.add_bias(h, block.b3)?;
    let h = g.gelu(h);
    let h = reg.dropout(g, h)?;
    let w4t = g.transpose(block.w4)?; // [D_C, C]
    let o = g.matmul(h, w4t)?;
    let o = g.add_bias(o, block.b4)?;
    let o = reg.dropout(g, o)?;
    let o = reg.stoch_branch(g, o)?;
    g.add(u, o)
}

/// Standalone single-block application, mainly for verification.
pub fn mixer_block<T: Scalar>(
    g: &mut Graph<T>,
    config: &MixerConfig,
    block: &GraphBlock,
    x: NodeId,
    phase: Phase,
    rng: Option<&mut Rng>,
) -> Result<NodeId> {
    let mut reg = regularizers(config, phase, rng, 1)?;
    mixer_block_inner(g, config, block, x, &mut reg)
}

fn regularizers<'r>(
    config: &MixerConfig,
    phase: Phase,
    rng: Option<&'r mut Rng>,
    num_blocks: usize,
) -> Result<Reg<'r>> {
    let active =
        phase == Phase::Train && (config.drop_rate > 0.0 || config.stoch_depth > 0.0);
    if active && rng.is_none() {
        return Err(Error::Contract(
            "train-mode forward with regularization needs an rng".into(),
        ));
    }
    Ok(Reg {
        phase,
        drop_rate: config.drop_rate,
        stoch_depth: config.stoch_depth,
        total_branches: 2 * num_blocks,
        branch_idx: 0,
        rng,
    })
}

/// Interesting intermediate nodes of a full forward pass.
pub struct ForwardNodes {
    /// Stem output, `[.., S, C]`.
    pub tokens: NodeId,
    /// Input of the pre-head LayerNorm (last block output).
    pub prehead_input: NodeId,
    /// Per-token features after the pre-head LayerNorm, `[.., S, C]`.
    pub prehead_normed: NodeId,
    /// Pooled pre-head features, `[.., C]`.
    pub pooled: NodeId,
    /// Classifier output, `[.., K]`.
    pub logits: NodeId,
}

/// Build the whole model on an already-patchified batched input node
/// (`[B, S, ch*P^2]`).
pub fn build_forward<T: Scalar>(
    g: &mut Graph<T>,
    config: &MixerConfig,
    params: &GraphParams,
    patches: NodeId,
    phase: Phase,
    rng: Option<&mut Rng>,
) -> Result<ForwardNodes> {
    config.validate()?;
    if g.value(patches).rank() != 3 {
        return Err(Error::Contract(format!(
            "build_forward needs a [B, S, {}] input, got {:?}",
            config.patch_dim(),
            g.value(patches).shape()
        )));
    }
    let mut reg = regularizers(config, phase, rng, config.num_blocks)?;
    let proj = g.matmul(patches, params.stem_w)?;
    let tokens = g.add_bias(proj, params.stem_b)?;
    let mut x = tokens;
    for block in &params.blocks {
        x = mixer_block_inner(g, config, block, x, &mut reg)?;
    }
    let eps = T::of_f64(LAYER_NORM_EPS);
    let pre = g.layer_norm(x, params.prehead_gamma, params.prehead_beta, eps)?;
    let pooled = g.mean_tokens(pre)?;
    let logits_w = g.matmul(pooled, params.head_w)?;
    let logits = g.add_bias(logits_w, params.head_b)?;
    Ok(ForwardNodes {
        tokens,
        prehead_input: x,
        prehead_normed: pre,
        pooled,
        logits,
    })
}

fn batched_patches<T: Scalar>(config: &MixerConfig, images: &Tensor<T>) -> Result<Tensor<T>> {
    let patches = patchify(config, images)?;
    if patches.rank() == 2 {
        let mut shape = vec![1];
        shape.extend_from_slice(patches.shape());
        patches.reshape(&shape)
    } else {
        Ok(patches)
    }
}

/// Eval-mode logits `[B, K]` for a batch of images (a single `[H, W, ch]`
/// image is treated as a batch of one).
pub fn forward_eval<T: Scalar>(
    config: &MixerConfig,
    params: &MixerParams<T>,
    images: &Tensor<T>,
) -> Result<Tensor<T>> {
    let patches = batched_patches(config, images)?;
    let mut g = Graph::new();
    let bound = bind_params(&mut g, params);
    let input = g.input(patches);
    let nodes = build_forward(&mut g, config, &bound, input, Phase::Eval, None)?;
    Ok(g.value(nodes.logits).clone())
}

/// Eval-mode pooled pre-head features `[B, C]`.
pub fn forward_features<T: Scalar>(
    config: &MixerConfig,
    params: &MixerParams<T>,
    images: &Tensor<T>,
) -> Result<Tensor<T>> {
    let patches = batched_patches(config, images)?;
    let mut g = Graph::new();
    let bound = bind_params(&mut g, params);
    let input = g.input(patches);
    let nodes = build_forward(&mut g, config, &bound, input, Phase::Eval, None)?;
    Ok(g.value(nodes.pooled).clone())
}
