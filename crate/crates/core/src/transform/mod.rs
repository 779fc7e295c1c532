//! Knowledge-embedded proxy transforms: monotone intensity translation and
//! anatomy-shaped masking.

pub mod bezier;
pub mod mask;

pub use bezier::{
    apply_translation, bezier_point, build_translation, sample_control_points, ControlPoints,
    Direction, Point, TranslationTable, DEFAULT_RESOLUTION,
};
pub use mask::{
    apply_mask, block_mask, find_brightness_center, generate_mask, rays_mask, stripe_mask, Mask,
    MaskKind, MaskSpec, StripeOrientation,
};
