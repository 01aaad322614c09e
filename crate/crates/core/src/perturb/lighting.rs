//! Global affine and local Gaussian illumination changes.

use serde::{Deserialize, Serialize};

use crate::raster::ImageBuffer;

/// Projected directional light: a 2D Gaussian gain field.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GaussianLight {
    pub x0: f64,
    pub y0: f64,
    pub amplitude: f64,
    pub sigma_x: f64,
    pub sigma_y: f64,
}

impl GaussianLight {
    pub fn is_valid(&self) -> bool {
        self.sigma_x > 0.0 && self.sigma_y > 0.0 && self.amplitude >= 0.0 && self.x0.is_finite() && self.y0.is_finite()
    }

    /// `A · exp(−((x−x0)²/2σx² + (y−y0)²/2σy²))`
    #[inline]
    pub fn gain(&self, x: f64, y: f64) -> f64 {
        let dx = x - self.x0;
        let dy = y - self.y0;
        self.amplitude
            * (-(dx * dx / (2.0 * self.sigma_x * self.sigma_x) + dy * dy / (2.0 * self.sigma_y * self.sigma_y))).exp()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LightingConfig {
    pub global_gain: f64,
    pub global_bias: f64,
    #[serde(default)]
    pub lights: Vec<GaussianLight>,
}

impl Default for LightingConfig {
    fn default() -> Self {
        Self {
            global_gain: 1.0,
            global_bias: 0.0,
            lights: Vec::new(),
        }
    }
}

impl LightingConfig {
    pub fn is_valid(&self) -> bool {
        self.global_gain >= 0.0 && self.global_bias.is_finite() && self.lights.iter().all(GaussianLight::is_valid)
    }

    /// Global affine change first, then the local lights.
    pub fn apply(&self, img: &ImageBuffer) -> ImageBuffer {
        let lit = apply_global_affine(img, self.global_gain, self.global_bias);
        apply_gaussian_lights(&lit, &self.lights)
    }
}

#[inline]
fn to_u8(v: f64) -> u8 {
    v.round().clamp(0.0, 255.0) as u8
}

/// `clamp(round(gain·p + bias), 0, 255)` per pixel.
pub fn apply_global_affine(img: &ImageBuffer, gain: f64, bias: f64) -> ImageBuffer {
    let mut out = img.clone();
    for p in out.pixels_mut() {
        *p = to_u8(gain * *p as f64 + bias);
    }
    out
}

/// Multiply every pixel by the summed gain of all lights, then clamp.
///
/// An empty light list leaves the image unchanged.
pub fn apply_gaussian_lights(img: &ImageBuffer, lights: &[GaussianLight]) -> ImageBuffer {
    if lights.is_empty() {
        return img.clone();
    }
    let mut out = img.clone();
    let w = img.width() as usize;
    for (i, p) in out.pixels_mut().iter_mut().enumerate() {
        let (x, y) = ((i % w) as f64, (i / w) as f64);
        let gain: f64 = lights.iter().map(|l| l.gain(x, y)).sum();
        *p = to_u8(*p as f64 * gain);
    }
    out
}
