//! Image perturbations used to harden datasets and stress the servo loop:
//! illumination changes and superpixel occluders.

pub mod lighting;
pub mod occlusion;
pub mod slic;

pub use lighting::{apply_gaussian_lights, apply_global_affine, GaussianLight, LightingConfig};
pub use occlusion::{
    composite_occlusion, extract_cluster, sample_from_segmentation, sample_occlusion_patch, OcclusionPatch,
    OcclusionRecord,
};
pub use slic::{slic_segment, SlicParams, SuperpixelLabels};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum PerturbError {
    #[error("image {width}x{height} too small: {detail}")]
    ImageTooSmall { width: u32, height: u32, detail: String },
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
}
