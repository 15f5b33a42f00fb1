//! Parameter-recording augmentations and the add-one stage pipelines.

pub mod image;
pub mod params;
pub mod pipeline;

pub use image::Image;
pub use params::{AugKind, AugParams, ColorJitterParams, CropParams, FLAT_LAYOUT, FLAT_LEN};
pub use pipeline::{
    apply_jitter, apply_params, arrangement_code, build_pipelines, jitter_strength, jitter_strength_bucket,
    parse_arrangement, sample_params, sample_view, AugSettings, AugStepSpec, Pipeline, PipelineMode, PipelineSet,
    ViewPair,
};
