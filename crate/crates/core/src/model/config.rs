//! Architecture hyperparameters and the named reference configurations.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Input geometry, height x width x channels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageShape {
    pub h: usize,
    pub w: usize,
    pub channels: usize,
}

/// Token-mixing variant. `Standard` ties one MLP across all channels;
/// `UntiedToken` gives every channel its own copy; the grouped variants mix
/// several channels at once.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Standard,
    UntiedToken,
    Grouped(usize),
    GroupedViews(usize),
}

impl Variant {
    pub fn is_standard(self) -> bool {
        matches!(self, Variant::Standard)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixerConfig {
    pub num_blocks: usize,
    /// Patch edge in pixels.
    pub patch: usize,
    /// Hidden (channel) width C.
    pub hidden_c: usize,
    /// Token-mixing MLP width D_S.
    pub mlp_d_s: usize,
    /// Channel-mixing MLP width D_C.
    pub mlp_d_c: usize,
    pub image: ImageShape,
    pub num_classes: usize,
    #[serde(default = "Variant::default")]
    pub variant: Variant,
    #[serde(default)]
    pub drop_rate: f64,
    #[serde(default)]
    pub stoch_depth: f64,
    /// 1 for raster token order; K after a resolution expansion, meaning
    /// tokens are consumed as K^2 raster-ordered sub-grids.
    #[serde(default = "one")]
    pub expand_factor: usize,
}

impl Default for Variant {
    fn default() -> Self {
        Variant::Standard
    }
}

fn one() -> usize {
    1
}

impl MixerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch == 0 {
            return Err(Error::Config("patch size must be >= 1".into()));
        }
        if self.image.h % self.patch != 0 || self.image.w % self.patch != 0 {
            return Err(Error::Config(format!(
                "image {}x{} not divisible by patch {}",
                self.image.h, self.image.w, self.patch
            )));
        }
        if self.hidden_c == 0 || self.mlp_d_s == 0 || self.mlp_d_c == 0 {
            return Err(Error::Config("widths must be >= 1".into()));
        }
        if self.num_classes == 0 {
            return Err(Error::Config("num_classes must be >= 1".into()));
        }
        match self.variant {
            Variant::Grouped(g) | Variant::GroupedViews(g) => {
                if g == 0 || self.hidden_c % g != 0 {
                    return Err(Error::Config(format!(
                        "grouped variants need G >= 1 dividing C: C={}, G={g}",
                        self.hidden_c
                    )));
                }
            }
            _ => {}
        }
        if !(0.0..1.0).contains(&self.drop_rate) || !(0.0..1.0).contains(&self.stoch_depth) {
            return Err(Error::Config(
                "drop_rate and stoch_depth must lie in [0, 1)".into(),
            ));
        }
        if self.expand_factor == 0 {
            return Err(Error::Config("expand_factor must be >= 1".into()));
        }
        let k = self.expand_factor;
        if self.grid_h() % k != 0 || self.grid_w() % k != 0 {
            return Err(Error::Config(format!(
                "expand_factor {k} must divide the patch grid {}x{}",
                self.grid_h(),
                self.grid_w()
            )));
        }
        Ok(())
    }

    /// Number of tokens S = H*W / P^2.
    pub fn sequence_length(&self) -> Result<usize> {
        self.validate()?;
        Ok(self.grid_h() * self.grid_w())
    }

    /// Patch grid height H/P.
    pub fn grid_h(&self) -> usize {
        self.image.h / self.patch
    }

    /// Patch grid width W/P.
    pub fn grid_w(&self) -> usize {
        self.image.w / self.patch
    }

    /// Flattened patch length, channels * P^2.
    pub fn patch_dim(&self) -> usize {
        self.image.channels * self.patch * self.patch
    }

    /// With a different input resolution, keeping everything else.
    pub fn with_image(&self, h: usize, w: usize) -> Self {
        let mut c = self.clone();
        c.image.h = h;
        c.image.w = w;
        c
    }

    /// The reference configurations: the seven published model scales at
    /// 224x224x3 / 1000 classes, plus two desk-scale models.
    pub fn named(name: &str) -> Option<MixerConfig> {
        let published = |blocks, patch, c, d_s, d_c| MixerConfig {
            num_blocks: blocks,
            patch,
            hidden_c: c,
            mlp_d_s: d_s,
            mlp_d_c: d_c,
            image: ImageShape {
                h: 224,
                w: 224,
                channels: 3,
            },
            num_classes: 1000,
            variant: Variant::Standard,
            drop_rate: 0.0,
            stoch_depth: 0.0,
            expand_factor: 1,
        };
        match name {
            "S/32" => Some(published(8, 32, 512, 256, 2048)),
            "S/16" => Some(published(8, 16, 512, 256, 2048)),
            "B/32" => Some(published(12, 32, 768, 384, 3072)),
            "B/16" => Some(published(12, 16, 768, 384, 3072)),
            "L/32" => Some(published(24, 32, 1024, 512, 4096)),
            "L/16" => Some(published(24, 16, 1024, 512, 4096)),
            "H/14" => Some(published(32, 14, 1280, 640, 5120)),
            "toy" => Some(MixerConfig {
                num_blocks: 1,
                patch: 4,
                hidden_c: 8,
                mlp_d_s: 16,
                mlp_d_c: 32,
                image: ImageShape {
                    h: 8,
                    w: 8,
                    channels: 3,
                },
                num_classes: 10,
                variant: Variant::Standard,
                drop_rate: 0.0,
                stoch_depth: 0.0,
                expand_factor: 1,
            }),
            "tiny-cifar" => Some(MixerConfig {
                num_blocks: 4,
                patch: 4,
                hidden_c: 128,
                mlp_d_s: 64,
                mlp_d_c: 512,
                image: ImageShape {
                    h: 32,
                    w: 32,
                    channels: 3,
                },
                num_classes: 10,
                variant: Variant::Standard,
                drop_rate: 0.0,
                stoch_depth: 0.0,
                expand_factor: 1,
            }),
            _ => None,
        }
    }

    pub fn names() -> &'static [&'static str] {
        &[
            "S/32",
            "S/16",
            "B/32",
            "B/16",
            "L/32",
            "L/16",
            "H/14",
            "toy",
            "tiny-cifar",
        ]
    }
}
