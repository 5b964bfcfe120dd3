//! The complete parameter set, addressable by canonical names.
//!
//! Canonical order (also the checkpoint tensor order): stem, blocks in depth
//! order with each block's fields in declaration order, pre-head norm, head.

use crate::error::{Error, Result};
use crate::model::config::{MixerConfig, Variant};
use crate::rng::{self, Rng};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Token-mixing MLP weights; the layout depends on the variant.
#[derive(Debug, Clone, PartialEq)]
pub enum TokenMlp<T> {
    /// Shared across channels: w1 [D_S, S], w2 [S, D_S].
    Tied {
        w1: Tensor<T>,
        b1: Tensor<T>,
        w2: Tensor<T>,
        b2: Tensor<T>,
    },
    /// One copy per channel: w1 [C, D_S, S], b1 [C, D_S], w2 [C, S, D_S], b2 [C, S].
    Untied {
        w1: Tensor<T>,
        b1: Tensor<T>,
        w2: Tensor<T>,
        b2: Tensor<T>,
    },
    /// Mixes G-channel groups: w1 [D_S, G*S], w2 [G*S, D_S].
    Grouped {
        w1: Tensor<T>,
        b1: Tensor<T>,
        w2: Tensor<T>,
        b2: Tensor<T>,
    },
    /// Like `Grouped` but with G trainable views: proj [C, C] holds the G
    /// projections R^C -> R^{C/G} side by side (view g in columns
    /// g*C/G .. (g+1)*C/G), bias-free.
    GroupedViews {
        proj: Tensor<T>,
        w1: Tensor<T>,
        b1: Tensor<T>,
        w2: Tensor<T>,
        b2: Tensor<T>,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams<T> {
    pub ln1_gamma: Tensor<T>,
    pub ln1_beta: Tensor<T>,
    pub token: TokenMlp<T>,
    pub ln2_gamma: Tensor<T>,
    pub ln2_beta: Tensor<T>,
    pub w3: Tensor<T>,
    pub b3: Tensor<T>,
    pub w4: Tensor<T>,
    pub b4: Tensor<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MixerParams<T> {
    pub stem_w: Tensor<T>,
    pub stem_b: Tensor<T>,
    pub blocks: Vec<BlockParams<T>>,
    pub prehead_gamma: Tensor<T>,
    pub prehead_beta: Tensor<T>,
    pub head_w: Tensor<T>,
    pub head_b: Tensor<T>,
}

/// Kernels are truncated normal with realized std 1/sqrt(fan_in); biases and
/// the classifier head start at zero, norms at identity.
pub fn init_params<T: Scalar>(config: &MixerConfig, seed: u64) -> Result<MixerParams<T>> {
    config.validate()?;
    let mut rng = rng::stream(seed, 0);
    let s = config.sequence_length()?;
    let c = config.hidden_c;
    let (d_s, d_c) = (config.mlp_d_s, config.mlp_d_c);
    let pd = config.patch_dim();
    let k = config.num_classes;

    let kernel = |shape: &[usize], fan_in: usize, rng: &mut Rng| {
        rng::truncated_normal_tensor::<T>(shape, 1.0 / (fan_in as f64).sqrt(), rng)
    };

    let stem_w = kernel(&[pd, c], pd, &mut rng);
    let stem_b = Tensor::zeros(&[c]);

    let blocks = (0..config.num_blocks)
        .map(|_| {
            let token = match config.variant {
                Variant::Standard => TokenMlp::Tied {
                    w1: kernel(&[d_s, s], s, &mut rng),
                    b1: Tensor::zeros(&[d_s]),
                    w2: kernel(&[s, d_s], d_s, &mut rng),
                    b2: Tensor::zeros(&[s]),
                },
                Variant::UntiedToken => TokenMlp::Untied {
                    w1: kernel(&[c, d_s, s], s, &mut rng),
                    b1: Tensor::zeros(&[c, d_s]),
                    w2: kernel(&[c, s, d_s], d_s, &mut rng),
                    b2: Tensor::zeros(&[c, s]),
                },
                Variant::Grouped(g) => TokenMlp::Grouped {
                    w1: kernel(&[d_s, g * s], g * s, &mut rng),
                    b1: Tensor::zeros(&[d_s]),
                    w2: kernel(&[g * s, d_s], d_s, &mut rng),
                    b2: Tensor::zeros(&[g * s]),
                },
                Variant::GroupedViews(g) => TokenMlp::GroupedViews {
                    proj: kernel(&[c, c], c, &mut rng),
                    w1: kernel(&[d_s, g * s], g * s, &mut rng),
                    b1: Tensor::zeros(&[d_s]),
                    w2: kernel(&[g * s, d_s], d_s, &mut rng),
                    b2: Tensor::zeros(&[g * s]),
                },
            };
            BlockParams {
                ln1_gamma: Tensor::filled(&[c], T::one()),
                ln1_beta: Tensor::zeros(&[c]),
                token,
                ln2_gamma: Tensor::filled(&[c], T::one()),
                ln2_beta: Tensor::zeros(&[c]),
                w3: kernel(&[d_c, c], c, &mut rng),
                b3: Tensor::zeros(&[d_c]),
                w4: kernel(&[c, d_c], d_c, &mut rng),
                b4: Tensor::zeros(&[c]),
            }
        })
        .collect();

    Ok(MixerParams {
        stem_w,
        stem_b,
        blocks,
        prehead_gamma: Tensor::filled(&[c], T::one()),
        prehead_beta: Tensor::zeros(&[c]),
        head_w: Tensor::zeros(&[c, k]),
        head_b: Tensor::zeros(&[k]),
    })
}

impl<T: Scalar> TokenMlp<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut impl FnMut(String, &'a Tensor<T>)) {
        match self {
            TokenMlp::Tied { w1, b1, w2, b2 }
            | TokenMlp::Untied { w1, b1, w2, b2 }
            | TokenMlp::Grouped { w1, b1, w2, b2 } => {
                f(format!("{prefix}.w1"), w1);
                f(format!("{prefix}.b1"), b1);
                f(format!("{prefix}.w2"), w2);
                f(format!("{prefix}.b2"), b2);
            }
            TokenMlp::GroupedViews { proj, w1, b1, w2, b2 } => {
                f(format!("{prefix}.proj"), proj);
                f(format!("{prefix}.w1"), w1);
                f(format!("{prefix}.b1"), b1);
                f(format!("{prefix}.w2"), w2);
                f(format!("{prefix}.b2"), b2);
            }
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut impl FnMut(String, &mut Tensor<T>)) {
        match self {
            TokenMlp::Tied { w1, b1, w2, b2 }
            | TokenMlp::Untied { w1, b1, w2, b2 }
            | TokenMlp::Grouped { w1, b1, w2, b2 } => {
                f(format!("{prefix}.w1"), w1);
                f(format!("{prefix}.b1"), b1);
                f(format!("{prefix}.w2"), w2);
                f(format!("{prefix}.b2"), b2);
            }
            TokenMlp::GroupedViews { proj, w1, b1, w2, b2 } => {
                f(format!("{prefix}.proj"), proj);
                f(format!("{prefix}.w1"), w1);
                f(format!("{prefix}.b1"), b1);
                f(format!("{prefix}.w2"), w2);
                f(format!("{prefix}.b2"), b2);
            }
        }
    }
}

impl<T: Scalar> MixerParams<T> {
    /// Visit every tensor with its canonical name, in canonical order.
    pub fn visit<'a>(&'a self, mut f: impl FnMut(String, &'a Tensor<T>)) {
        f("stem.w".into(), &self.stem_w);
        f("stem.b".into(), &self.stem_b);
        for (i, b) in self.blocks.iter().enumerate() {
            f(format!("block{i}.ln1.gamma"), &b.ln1_gamma);
            f(format!("block{i}.ln1.beta"), &b.ln1_beta);
            b.token.visit(&format!("block{i}.token"), &mut f);
            f(format!("block{i}.ln2.gamma"), &b.ln2_gamma);
            f(format!("block{i}.ln2.beta"), &b.ln2_beta);
            f(format!("block{i}.channel.w3"), &b.w3);
            f(format!("block{i}.channel.b3"), &b.b3);
            f(format!("block{i}.channel.w4"), &b.w4);
            f(format!("block{i}.channel.b4"), &b.b4);
        }
        f("prehead.gamma".into(), &self.prehead_gamma);
        f("prehead.beta".into(), &self.prehead_beta);
        f("head.w".into(), &self.head_w);
        f("head.b".into(), &self.head_b);
    }

    pub fn visit_mut(&mut self, mut f: impl FnMut(String, &mut Tensor<T>)) {
        f("stem.w".into(), &mut self.stem_w);
        f("stem.b".into(), &mut self.stem_b);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            f(format!("block{i}.ln1.gamma"), &mut b.ln1_gamma);
            f(format!("block{i}.ln1.beta"), &mut b.ln1_beta);
            b.token.visit_mut(&format!("block{i}.token"), &mut f);
            f(format!("block{i}.ln2.gamma"), &mut b.ln2_gamma);
            f(format!("block{i}.ln2.beta"), &mut b.ln2_beta);
            f(format!("block{i}.channel.w3"), &mut b.w3);
            f(format!("block{i}.channel.b3"), &mut b.b3);
            f(format!("block{i}.channel.w4"), &mut b.w4);
            f(format!("block{i}.channel.b4"), &mut b.b4);
        }
        f("prehead.gamma".into(), &mut self.prehead_gamma);
        f("prehead.beta".into(), &mut self.prehead_beta);
        f("head.w".into(), &mut self.head_w);
        f("head.b".into(), &mut self.head_b);
    }

    /// Canonical names in order.
    pub fn names(&self) -> Vec<String> {
        let mut out = Vec::new();
        self.visit(|n, _| out.push(n));
        out
    }

    /// Tensors in canonical order.
    pub fn flatten(&self) -> Vec<&Tensor<T>> {
        let mut out = Vec::new();
        self.visit(|_, t| out.push(t));
        out
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        let mut found = None;
        self.visit(|n, t| {
            if n == name {
                found = Some(t);
            }
        });
        found
    }

    /// Total element count excluding the classifier head.
    pub fn numel_without_head(&self) -> u64 {
        let mut total = 0u64;
        self.visit(|name, t| {
            if !name.starts_with("head.") {
                total += t.numel() as u64;
            }
        });
        total
    }

    pub fn cast<U: Scalar>(&self) -> MixerParams<U> {
        let token_cast = |t: &TokenMlp<T>| match t {
            TokenMlp::Tied { w1, b1, w2, b2 } => TokenMlp::Tied {
                w1: w1.cast(),
                b1: b1.cast(),
                w2: w2.cast(),
                b2: b2.cast(),
            },
            TokenMlp::Untied { w1, b1, w2, b2 } => TokenMlp::Untied {
                w1: w1.cast(),
                b1: b1.cast(),
                w2: w2.cast(),
                b2: b2.cast(),
            },
            TokenMlp::Grouped { w1, b1, w2, b2 } => TokenMlp::Grouped {
                w1: w1.cast(),
                b1: b1.cast(),
                w2: w2.cast(),
                b2: b2.cast(),
            },
            TokenMlp::GroupedViews { proj, w1, b1, w2, b2 } => TokenMlp::GroupedViews {
                proj: proj.cast(),
                w1: w1.cast(),
                b1: b1.cast(),
                w2: w2.cast(),
                b2: b2.cast(),
            },
        };
        MixerParams {
            stem_w: self.stem_w.cast(),
            stem_b: self.stem_b.cast(),
            blocks: self
                .blocks
                .iter()
                .map(|b| BlockParams {
                    ln1_gamma: b.ln1_gamma.cast(),
                    ln1_beta: b.ln1_beta.cast(),
                    token: token_cast(&b.token),
                    ln2_gamma: b.ln2_gamma.cast(),
                    ln2_beta: b.ln2_beta.cast(),
                    w3: b.w3.cast(),
                    b3: b.b3.cast(),
                    w4: b.w4.cast(),
                    b4: b.b4.cast(),
                })
                .collect(),
            prehead_gamma: self.prehead_gamma.cast(),
            prehead_beta: self.prehead_beta.cast(),
            head_w: self.head_w.cast(),
            head_b: self.head_b.cast(),
        }
    }

    /// Rebuild a parameter set from named tensors (checkpoint loading).
    /// Every canonical name must be present with the right shape.
    pub fn from_named(
        config: &MixerConfig,
        mut lookup: impl FnMut(&str) -> Option<Tensor<T>>,
    ) -> Result<Self> {
        // Template gives canonical names and shapes.
        let template = init_params::<T>(config, 0)?;
        let mut taken: Vec<(String, Tensor<T>)> = Vec::new();
        let mut missing = Vec::new();
        template.visit(|name, t| match lookup(&name) {
            Some(found) if found.shape() == t.shape() => taken.push((name, found)),
            Some(found) => missing.push(format!(
                "{name}: shape {:?} expected {:?}",
                found.shape(),
                t.shape()
            )),
            None => missing.push(format!("{name}: missing")),
        });
        if !missing.is_empty() {
            return Err(Error::Contract(format!(
                "parameter set incomplete: {}",
                missing.join("; ")
            )));
        }
        let mut iter = taken.into_iter();
        let mut out = template;
        out.visit_mut(|name, t| {
            let (n, v) = iter.next().expect("same canonical order");
            debug_assert_eq!(n, name);
            *t = v;
        });
        Ok(out)
    }
}
