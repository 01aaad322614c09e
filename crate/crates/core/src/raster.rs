//! Single-channel 8-bit images and their PNG boundary.

use std::io::Cursor;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

#[derive(Debug, thiserror::Error)]
pub enum ImageError {
    #[error("pixel buffer holds {len} values, expected {width}x{height}")]
    BadLength { width: u32, height: u32, len: usize },
    #[error("failed to read image {path}: {source}")]
    Read {
        path: String,
        #[source]
        source: ::image::ImageError,
    },
    #[error("failed to write image {path}: {source}")]
    Write {
        path: String,
        #[source]
        source: ::image::ImageError,
    },
    #[error("image codec error: {0}")]
    Codec(#[from] ::image::ImageError),
}

/// Row-major grayscale image.
#[derive(Clone, PartialEq, Eq)]
pub struct ImageBuffer {
    width: u32,
    height: u32,
    pixels: Vec<u8>,
}

impl std::fmt::Debug for ImageBuffer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "ImageBuffer({}x{})", self.width, self.height)
    }
}

impl ImageBuffer {
    pub fn new(width: u32, height: u32, pixels: Vec<u8>) -> Result<Self, ImageError> {
        if pixels.len() != width as usize * height as usize {
            return Err(ImageError::BadLength {
                width,
                height,
                len: pixels.len(),
            });
        }
        Ok(Self { width, height, pixels })
    }

    pub fn filled(width: u32, height: u32, value: u8) -> Self {
        Self {
            width,
            height,
            pixels: vec![value; width as usize * height as usize],
        }
    }

    pub fn from_fn(width: u32, height: u32, mut f: impl FnMut(u32, u32) -> u8) -> Self {
        let mut pixels = Vec::with_capacity(width as usize * height as usize);
        for y in 0..height {
            for x in 0..width {
                pixels.push(f(x, y));
            }
        }
        Self { width, height, pixels }
    }

    #[inline]
    pub fn width(&self) -> u32 {
        self.width
    }

    #[inline]
    pub fn height(&self) -> u32 {
        self.height
    }

    #[inline]
    pub fn dimensions(&self) -> (u32, u32) {
        (self.width, self.height)
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.pixels.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }

    #[inline]
    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    #[inline]
    pub fn pixels_mut(&mut self) -> &mut [u8] {
        &mut self.pixels
    }

    pub fn into_pixels(self) -> Vec<u8> {
        self.pixels
    }

    #[inline]
    pub fn get(&self, x: u32, y: u32) -> u8 {
        self.pixels[y as usize * self.width as usize + x as usize]
    }

    #[inline]
    pub fn set(&mut self, x: u32, y: u32, value: u8) {
        let w = self.width as usize;
        self.pixels[y as usize * w + x as usize] = value;
    }

    /// Bilinear lookup at continuous pixel coordinates (pixel centers at integers).
    ///
    /// Each pixel covers `±0.5` around its center, so coordinates in
    /// `[-0.5, w-0.5] × [-0.5, h-0.5]` are inside (clamped to the edge samples);
    /// anything else is `None`.
    #[inline]
    pub fn sample_bilinear(&self, x: f64, y: f64) -> Option<f64> {
        let max_x = (self.width - 1) as f64;
        let max_y = (self.height - 1) as f64;
        if !(x >= -0.5 && y >= -0.5 && x <= max_x + 0.5 && y <= max_y + 0.5) {
            return None;
        }
        let x = x.clamp(0.0, max_x);
        let y = y.clamp(0.0, max_y);
        let x0 = x.floor();
        let y0 = y.floor();
        let fx = x - x0;
        let fy = y - y0;
        let x0 = x0 as usize;
        let y0 = y0 as usize;
        let w = self.width as usize;
        let x1 = (x0 + 1).min(self.width as usize - 1);
        let y1 = (y0 + 1).min(self.height as usize - 1);
        let p = |xx: usize, yy: usize| self.pixels[yy * w + xx] as f64;
        let top = p(x0, y0) * (1.0 - fx) + p(x1, y0) * fx;
        let bottom = p(x0, y1) * (1.0 - fx) + p(x1, y1) * fx;
        Some(top * (1.0 - fy) + bottom * fy)
    }

    /// SHA-256 of the raw pixel bytes, hex encoded.
    pub fn sha256_hex(&self) -> String {
        let digest = Sha256::digest(&self.pixels);
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn mean(&self) -> f64 {
        self.pixels.iter().map(|&p| p as f64).sum::<f64>() / self.pixels.len().max(1) as f64
    }

    /// Load any PNG/JPEG; color sources are converted to luma (ITU-R 601 weights).
    pub fn load(path: impl AsRef<Path>) -> Result<Self, ImageError> {
        let path = path.as_ref();
        let img = ::image::open(path).map_err(|source| ImageError::Read {
            path: path.display().to_string(),
            source,
        })?;
        Ok(Self::from_dynamic(img))
    }

    fn from_dynamic(img: ::image::DynamicImage) -> Self {
        use ::image::DynamicImage;
        match img {
            DynamicImage::ImageLuma8(g) => {
                let (w, h) = g.dimensions();
                Self {
                    width: w,
                    height: h,
                    pixels: g.into_raw(),
                }
            }
            other => {
                let rgb = other.to_rgb8();
                let (w, h) = rgb.dimensions();
                let pixels = rgb.pixels().map(|p| luma601(p.0[0], p.0[1], p.0[2])).collect();
                Self {
                    width: w,
                    height: h,
                    pixels,
                }
            }
        }
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<(), ImageError> {
        let path = path.as_ref();
        let bytes = self.encode_png()?;
        std::fs::write(path, bytes).map_err(|e| ImageError::Write {
            path: path.display().to_string(),
            source: ::image::ImageError::IoError(e),
        })
    }

    pub fn encode_png(&self) -> Result<Vec<u8>, ImageError> {
        let mut out = Vec::new();
        ::image::write_buffer_with_format(
            &mut Cursor::new(&mut out),
            &self.pixels,
            self.width,
            self.height,
            ::image::ExtendedColorType::L8,
            ::image::ImageFormat::Png,
        )?;
        Ok(out)
    }

    pub fn decode_png(bytes: &[u8]) -> Result<Self, ImageError> {
        let img = ::image::load_from_memory_with_format(bytes, ::image::ImageFormat::Png)?;
        Ok(Self::from_dynamic(img))
    }
}

#[inline]
pub fn luma601(r: u8, g: u8, b: u8) -> u8 {
    (0.299 * r as f64 + 0.587 * g as f64 + 0.114 * b as f64)
        .round()
        .clamp(0.0, 255.0) as u8
}

/// Smooth, deterministic pseudo-natural texture: a sum of random plane waves
/// over a few octaves. Used as a stand-in scene when no photograph is given and
/// as a fallback occluder corpus.
pub fn procedural_texture(width: u32, height: u32, seed: u64) -> ImageBuffer {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scale = width.max(height) as f64;
    let waves: Vec<(f64, f64, f64, f64)> = (0..24)
        .map(|i| {
            // wavelengths from ~scale/2 down to ~scale/24
            let octave = 1.0 + (i / 6) as f64;
            let freq = octave * (1.0 + rng.random::<f64>()) * std::f64::consts::TAU / scale;
            let dir = rng.random::<f64>() * std::f64::consts::TAU;
            let phase = rng.random::<f64>() * std::f64::consts::TAU;
            let amp = 1.0 / octave;
            (freq * dir.cos(), freq * dir.sin(), phase, amp)
        })
        .collect();
    let norm: f64 = waves.iter().map(|w| w.3).sum::<f64>();
    ImageBuffer::from_fn(width, height, |x, y| {
        let s: f64 = waves
            .iter()
            .map(|&(kx, ky, ph, a)| a * (kx * x as f64 + ky * y as f64 + ph).sin())
            .sum();
        (128.0 + 110.0 * (2.2 * s / norm).tanh()).round() as u8
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_length() {
        assert!(matches!(
            ImageBuffer::new(3, 2, vec![0; 5]),
            Err(ImageError::BadLength { .. })
        ));
    }

    #[test]
    fn bilinear_hits_grid_exactly() {
        let img = ImageBuffer::from_fn(4, 3, |x, y| (x * 10 + y) as u8);
        for y in 0..3 {
            for x in 0..4 {
                assert_eq!(img.sample_bilinear(x as f64, y as f64), Some(img.get(x, y) as f64));
            }
        }
        assert_eq!(img.sample_bilinear(0.5, 0.0), Some(5.0));
        assert_eq!(img.sample_bilinear(-0.3, 0.0), Some(img.get(0, 0) as f64));
        assert_eq!(img.sample_bilinear(3.0, 2.5), Some(img.get(3, 2) as f64));
        assert_eq!(img.sample_bilinear(-0.51, 0.0), None);
        assert_eq!(img.sample_bilinear(3.0, 2.51), None);
    }

    #[test]
    fn png_round_trip() {
        let img = procedural_texture(37, 21, 3);
        let back = ImageBuffer::decode_png(&img.encode_png().unwrap()).unwrap();
        assert_eq!(img, back);
    }

    #[test]
    fn color_png_is_converted_to_luma() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rgb.png");
        let rgb = ::image::RgbImage::from_fn(2, 1, |x, _| {
            if x == 0 {
                ::image::Rgb([255, 0, 0])
            } else {
                ::image::Rgb([10, 200, 30])
            }
        });
        rgb.save(&path).unwrap();
        let img = ImageBuffer::load(&path).unwrap();
        assert_eq!(img.pixels(), &[luma601(255, 0, 0), luma601(10, 200, 30)]);
        assert_eq!(img.get(0, 0), 76);
    }

    #[test]
    fn procedural_texture_is_deterministic_and_textured() {
        let a = procedural_texture(64, 64, 11);
        assert_eq!(a, procedural_texture(64, 64, 11));
        assert_ne!(a, procedural_texture(64, 64, 12));
        let (lo, hi) = a
            .pixels()
            .iter()
            .fold((255u8, 0u8), |(lo, hi), &p| (lo.min(p), hi.max(p)));
        assert!(hi - lo > 100);
    }
}
