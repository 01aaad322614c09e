//! Occluders cut from other images: one superpixel pasted at a random spot.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::raster::ImageBuffer;

use super::slic::{slic_segment, SlicParams, SuperpixelLabels};
use super::PerturbError;

pub const MIN_CORPUS_SIDE: u32 = 32;

/// A cluster of pixels and its mask, stored over the cluster's bounding box.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct OcclusionPatch {
    pub width: u32,
    pub height: u32,
    pub pixels: Vec<u8>,
    pub mask: Vec<bool>,
    /// Target-image position of the bounding box's top-left corner.
    pub anchor: (u32, u32),
    pub cluster_id: u32,
}

impl OcclusionPatch {
    pub fn area(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

/// Where an occluder came from; enough to cut and paste it again.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OcclusionRecord {
    pub corpus_file: String,
    pub cluster_id: u32,
    pub anchor: [u32; 2],
}

/// Extract cluster `cluster_id` of `labels` from `corpus` as a patch.
pub fn extract_cluster(
    corpus: &ImageBuffer,
    labels: &SuperpixelLabels,
    cluster_id: u32,
    anchor: (u32, u32),
) -> Result<OcclusionPatch, PerturbError> {
    if cluster_id as usize >= labels.cluster_count {
        return Err(PerturbError::InvalidParameter(format!(
            "cluster {cluster_id} out of range (0..{})",
            labels.cluster_count
        )));
    }
    let w = labels.width;
    let (mut x0, mut y0, mut x1, mut y1) = (u32::MAX, u32::MAX, 0, 0);
    for (i, &l) in labels.labels.iter().enumerate() {
        if l == cluster_id {
            let (x, y) = (i as u32 % w, i as u32 / w);
            x0 = x0.min(x);
            y0 = y0.min(y);
            x1 = x1.max(x);
            y1 = y1.max(y);
        }
    }
    let (pw, ph) = (x1 - x0 + 1, y1 - y0 + 1);
    let mut pixels = Vec::with_capacity((pw * ph) as usize);
    let mut mask = Vec::with_capacity((pw * ph) as usize);
    for y in y0..=y1 {
        for x in x0..=x1 {
            let inside = labels.get(x, y) == cluster_id;
            mask.push(inside);
            pixels.push(if inside { corpus.get(x, y) } else { 0 });
        }
    }
    Ok(OcclusionPatch {
        width: pw,
        height: ph,
        pixels,
        mask,
        anchor,
        cluster_id,
    })
}

/// Segment `corpus`, pick a cluster uniformly and an in-bounds anchor in a
/// `target_dims` image uniformly.
pub fn sample_occlusion_patch<R: Rng + ?Sized>(
    corpus: &ImageBuffer,
    target_dims: (u32, u32),
    rng: &mut R,
    params: &SlicParams,
) -> Result<OcclusionPatch, PerturbError> {
    check_corpus(corpus)?;
    let labels = slic_segment(corpus, params)?;
    sample_from_segmentation(corpus, &labels, target_dims, rng)
}

pub(crate) fn check_corpus(corpus: &ImageBuffer) -> Result<(), PerturbError> {
    if corpus.width() < MIN_CORPUS_SIDE || corpus.height() < MIN_CORPUS_SIDE {
        return Err(PerturbError::ImageTooSmall {
            width: corpus.width(),
            height: corpus.height(),
            detail: format!("occluder sources must be at least {MIN_CORPUS_SIDE}x{MIN_CORPUS_SIDE}"),
        });
    }
    Ok(())
}

/// Same draw as [`sample_occlusion_patch`] with a precomputed segmentation.
pub fn sample_from_segmentation<R: Rng + ?Sized>(
    corpus: &ImageBuffer,
    labels: &SuperpixelLabels,
    target_dims: (u32, u32),
    rng: &mut R,
) -> Result<OcclusionPatch, PerturbError> {
    let cluster_id = rng.random_range(0..labels.cluster_count as u32);
    let anchor = (rng.random_range(0..target_dims.0), rng.random_range(0..target_dims.1));
    extract_cluster(corpus, labels, cluster_id, anchor)
}

/// Paste the masked patch pixels at its anchor, clipped to the image.
pub fn composite_occlusion(img: &ImageBuffer, patch: &OcclusionPatch) -> ImageBuffer {
    let mut out = img.clone();
    let (ax, ay) = (patch.anchor.0 as u64, patch.anchor.1 as u64);
    for py in 0..patch.height as u64 {
        let ty = ay + py;
        if ty >= img.height() as u64 {
            break;
        }
        for px in 0..patch.width as u64 {
            let tx = ax + px;
            if tx >= img.width() as u64 {
                break;
            }
            let i = (py * patch.width as u64 + px) as usize;
            if patch.mask[i] {
                out.set(tx as u32, ty as u32, patch.pixels[i]);
            }
        }
    }
    out
}
