//! Tower builders, the channel scaling rule and the static cost analyzer.

mod cost;
mod interp;
mod model;
mod spec;

pub use cost::{analyze, count_macs, count_params, CostReport, ModuleCost, MACS_CONVENTION};
pub use interp::{interpolate_pos_embed, resize_grid};
pub use model::{
    build, build_text_encoder, build_vit, build_vitamin, default_input, eot_positions, layout, ModelGraph, Module,
};
pub use spec::{round_channels, Arch, ConvBlockKind, TextSpec, VariantSpec, VitSpec};
