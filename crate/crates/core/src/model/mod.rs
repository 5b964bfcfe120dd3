//! The MLP-Mixer model: configuration, parameters, forward pass, accounting.

mod config;
mod count;
mod forward;
mod params;

pub use config::{ImageShape, MixerConfig, Variant};
pub use count::{flops_breakdown, flops_per_image, param_count, FlopsBreakdown};
pub use forward::{
    bind_params, block_split_order, build_forward, forward_eval, forward_features, mixer_block,
    patchify, patchify_embed, ForwardNodes, GraphBlock, GraphParams, GraphTokenMlp, Phase,
    LAYER_NORM_EPS,
};
pub use params::{init_params, BlockParams, MixerParams, TokenMlp};
