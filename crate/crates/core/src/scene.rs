//! Scene descriptions as they appear in dataset and scenario files.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::geometry::CameraIntrinsics;
use crate::raster::{procedural_texture, ImageBuffer, ImageError};
use crate::render::{PlanarScene, RenderError, DEFAULT_FILL_VALUE};

#[derive(Debug, thiserror::Error)]
pub enum SceneError {
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error(transparent)]
    Render(#[from] RenderError),
}

/// Where the reference image comes from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum ImageSource {
    /// PNG/JPEG file, relative paths resolved against the config file's directory.
    Path(PathBuf),
    /// Deterministic synthetic texture.
    Procedural { seed: u64 },
}

impl ImageSource {
    pub fn describe(&self) -> String {
        match self {
            ImageSource::Path(p) => p.display().to_string(),
            ImageSource::Procedural { seed } => format!("procedural:{seed}"),
        }
    }

    /// Inverse of [`ImageSource::describe`].
    pub fn parse_description(s: &str) -> ImageSource {
        match s.strip_prefix("procedural:").map(str::parse) {
            Some(Ok(seed)) => ImageSource::Procedural { seed },
            _ => ImageSource::Path(PathBuf::from(s)),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneConfig {
    pub reference_image: ImageSource,
    #[serde(default)]
    pub intrinsics: CameraIntrinsics,
    /// Plane distance along the reference optical axis, meters.
    pub depth0: f64,
    #[serde(default = "default_fill")]
    pub fill_value: u8,
}

fn default_fill() -> u8 {
    DEFAULT_FILL_VALUE
}

impl SceneConfig {
    pub fn procedural(seed: u64, intrinsics: CameraIntrinsics, depth0: f64) -> Self {
        Self {
            reference_image: ImageSource::Procedural { seed },
            intrinsics,
            depth0,
            fill_value: DEFAULT_FILL_VALUE,
        }
    }

    pub fn resolve_path(&self, base_dir: &Path) -> Option<PathBuf> {
        match &self.reference_image {
            ImageSource::Path(p) if p.is_relative() => Some(base_dir.join(p)),
            ImageSource::Path(p) => Some(p.clone()),
            ImageSource::Procedural { .. } => None,
        }
    }

    /// Load the reference image (resized to the intrinsics' resolution if needed).
    pub fn build(&self, base_dir: &Path) -> Result<PlanarScene, SceneError> {
        let (w, h) = (self.intrinsics.width, self.intrinsics.height);
        let image = match &self.reference_image {
            ImageSource::Procedural { seed } => procedural_texture(w, h, *seed),
            ImageSource::Path(_) => {
                let path = self.resolve_path(base_dir).expect("path source");
                let img = ImageBuffer::load(&path)?;
                if img.dimensions() == (w, h) {
                    img
                } else {
                    resize(&img, w, h)
                }
            }
        };
        Ok(PlanarScene::new(image, self.intrinsics, self.depth0, self.fill_value)?)
    }
}

fn resize(img: &ImageBuffer, w: u32, h: u32) -> ImageBuffer {
    let gray =
        ::image::GrayImage::from_raw(img.width(), img.height(), img.pixels().to_vec()).expect("consistent buffer");
    let out = ::image::imageops::resize(&gray, w, h, ::image::imageops::FilterType::Triangle);
    ImageBuffer::new(w, h, out.into_raw()).expect("resize output size")
}
