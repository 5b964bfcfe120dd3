//! Parameter and multiply-accumulate accounting.

use crate::error::Result;
use crate::model::config::{MixerConfig, Variant};

/// Exact parameter count excluding the classifier head, at the config's
/// image size.
pub fn param_count(config: &MixerConfig) -> Result<u64> {
    let s = config.sequence_length()? as u64;
    let c = config.hidden_c as u64;
    let d_s = config.mlp_d_s as u64;
    let d_c = config.mlp_d_c as u64;
    let pd = config.patch_dim() as u64;

    let stem = pd * c + c;
    let token = match config.variant {
        Variant::Standard => 2 * s * d_s + d_s + s,
        Variant::UntiedToken => c * (2 * s * d_s + d_s + s),
        Variant::Grouped(g) => {
            let gs = g as u64 * s;
            2 * gs * d_s + d_s + gs
        }
        Variant::GroupedViews(g) => {
            let gs = g as u64 * s;
            c * c + 2 * gs * d_s + d_s + gs
        }
    };
    let channel = 2 * c * d_c + d_c + c;
    let norms = 4 * c;
    let per_block = norms + token + channel;
    Ok(stem + config.num_blocks as u64 * per_block + 2 * c)
}

/// Forward multiply-accumulates for one image: dense products only, biases
/// and norms excluded.
pub fn flops_per_image(config: &MixerConfig) -> Result<u64> {
    let b = flops_breakdown(config)?;
    Ok(b.stem + config.num_blocks as u64 * b.per_block + b.head)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FlopsBreakdown {
    pub stem: u64,
    pub per_block: u64,
    pub head: u64,
}

pub fn flops_breakdown(config: &MixerConfig) -> Result<FlopsBreakdown> {
    let s = config.sequence_length()? as u64;
    let c = config.hidden_c as u64;
    let d_s = config.mlp_d_s as u64;
    let d_c = config.mlp_d_c as u64;
    let pd = config.patch_dim() as u64;
    let k = config.num_classes as u64;

    // Token mixing is 2*C*S*D_S in every variant: untied runs C separate
    // MLPs over length-S vectors, grouped runs C/G MLPs over length G*S.
    let mut per_block = 2 * c * s * d_s + 2 * s * c * d_c;
    if let Variant::GroupedViews(_) = config.variant {
        per_block += s * c * c; // the G view projections
    }
    Ok(FlopsBreakdown {
        stem: s * pd * c,
        per_block,
        head: c * k,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    // Closed-form summation oracle, written independently of param_count:
    // stem (ch*P^2*C + C) + L*(4C + token-MLP + channel-MLP) + 2C.
    fn param_count_oracle(l: u64, p: u64, ch: u64, c: u64, s: u64, d_s: u64, d_c: u64) -> u64 {
        let stem = ch * p * p * c + c;
        let token = d_s * s + d_s + s * d_s + s;
        let channel = d_c * c + d_c + c * d_c + c;
        stem + l * (4 * c + token + channel) + 2 * c
    }

    #[test]
    fn table_counts_round_to_published_millions() {
        let cases = [
            ("S/32", 19u64),
            ("S/16", 18),
            ("B/32", 60),
            ("B/16", 59),
            ("L/32", 206),
            ("L/16", 207),
            ("H/14", 431),
        ];
        for (name, millions) in cases {
            let cfg = MixerConfig::named(name).unwrap();
            let exact = param_count(&cfg).unwrap();
            let rounded = (exact + 500_000) / 1_000_000;
            assert_eq!(rounded, millions, "{name}: exact {exact}");
        }
    }

    #[test]
    fn b16_exact_count_cross_checked() {
        let cfg = MixerConfig::named("B/16").unwrap();
        let exact = param_count(&cfg).unwrap();
        assert_eq!(exact, 59_111_472);
        assert_eq!(exact, param_count_oracle(12, 16, 3, 768, 196, 384, 3072));
    }

    #[test]
    fn toy_count_matches_hand_summation() {
        let cfg = MixerConfig::named("toy").unwrap();
        assert_eq!(param_count(&cfg).unwrap(), 1140);
        assert_eq!(param_count_oracle(1, 4, 3, 8, 4, 16, 32), 1140);
    }

    #[test]
    fn count_matches_stored_tensor_sizes() {
        use crate::model::params::init_params;
        for name in ["toy", "tiny-cifar"] {
            let cfg = MixerConfig::named(name).unwrap();
            let p = init_params::<f32>(&cfg, 0).unwrap();
            assert_eq!(param_count(&cfg).unwrap(), p.numel_without_head());
        }
    }

    #[test]
    fn count_matches_stored_sizes_all_variants() {
        use crate::model::params::init_params;
        let mut cfg = MixerConfig::named("toy").unwrap();
        for variant in [
            Variant::Standard,
            Variant::UntiedToken,
            Variant::Grouped(2),
            Variant::GroupedViews(4),
        ] {
            cfg.variant = variant;
            let p = init_params::<f32>(&cfg, 0).unwrap();
            assert_eq!(
                param_count(&cfg).unwrap(),
                p.numel_without_head(),
                "{variant:?}"
            );
        }
    }

    #[test]
    fn zero_blocks_flops_is_stem_plus_head() {
        let mut cfg = MixerConfig::named("toy").unwrap();
        cfg.num_blocks = 0;
        let b = flops_breakdown(&cfg).unwrap();
        assert_eq!(flops_per_image(&cfg).unwrap(), b.stem + b.head);
    }

    #[test]
    fn per_block_flops_double_with_sequence_length() {
        // toy at 8x8/P4 has S=4; at 8x16 S=8.
        let cfg = MixerConfig::named("toy").unwrap();
        let wide = cfg.with_image(8, 16);
        let b1 = flops_breakdown(&cfg).unwrap();
        let b2 = flops_breakdown(&wide).unwrap();
        assert_eq!(b2.per_block, 2 * b1.per_block);
    }

    #[test]
    fn toy_flops_closed_form() {
        // 4*(3*16)*8 stem + (2*8*4*16 + 2*4*8*32) per block + 8*10 head
        let cfg = MixerConfig::named("toy").unwrap();
        let b = flops_breakdown(&cfg).unwrap();
        assert_eq!(b.stem, 4 * (3 * 16) * 8);
        assert_eq!(b.per_block, 2 * 8 * 4 * 16 + 2 * 4 * 8 * 32);
        assert_eq!(b.head, 8 * 10);
    }
}
