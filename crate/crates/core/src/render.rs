//! Virtual views of a textured plane seen from arbitrary camera poses.
//!
//! The plane is the one imaged by the reference camera `c0`: normal along the
//! reference optical axis, at distance `depth0`. A view from camera pose `c0Tc`
//! is produced by inverse-warping the reference image through the plane-induced
//! homography.

use crate::geometry::{CameraIntrinsics, PoseTransform};
use crate::raster::ImageBuffer;
use nalgebra::{Matrix3, Vector3};

/// Camera centers closer than this to the plane are rejected.
const MIN_PLANE_DISTANCE: f64 = 1e-6;
/// Rays must hit the plane with at least this much forward component.
const MIN_RAY_Z: f64 = 1e-12;

pub const DEFAULT_FILL_VALUE: u8 = 128;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum RenderError {
    #[error("degenerate camera pose: {0}")]
    DegeneratePose(String),
    #[error("image dimensions differ: {a:?} vs {b:?}")]
    DimensionMismatch { a: (u32, u32), b: (u32, u32) },
    #[error("invalid scene: {0}")]
    InvalidScene(String),
}

/// Textured plane at `depth0` in front of the reference camera.
#[derive(Clone, Debug)]
pub struct PlanarScene {
    reference_image: ImageBuffer,
    intrinsics: CameraIntrinsics,
    depth0: f64,
    fill_value: u8,
}

impl PlanarScene {
    pub fn new(
        reference_image: ImageBuffer,
        intrinsics: CameraIntrinsics,
        depth0: f64,
        fill_value: u8,
    ) -> Result<Self, RenderError> {
        if !(depth0 > 0.0 && depth0.is_finite()) {
            return Err(RenderError::InvalidScene(format!(
                "depth0 must be positive, got {depth0}"
            )));
        }
        if !intrinsics.is_valid() {
            return Err(RenderError::InvalidScene(format!("invalid intrinsics {intrinsics:?}")));
        }
        let dims = (intrinsics.width, intrinsics.height);
        if reference_image.dimensions() != dims {
            return Err(RenderError::DimensionMismatch {
                a: reference_image.dimensions(),
                b: dims,
            });
        }
        Ok(Self {
            reference_image,
            intrinsics,
            depth0,
            fill_value,
        })
    }

    pub fn reference_image(&self) -> &ImageBuffer {
        &self.reference_image
    }

    pub fn intrinsics(&self) -> &CameraIntrinsics {
        &self.intrinsics
    }

    pub fn depth0(&self) -> f64 {
        self.depth0
    }

    pub fn fill_value(&self) -> u8 {
        self.fill_value
    }

    /// Distance from the camera center to the plane along the plane normal.
    pub fn plane_distance(&self, pose: &PoseTransform) -> f64 {
        self.depth0 - pose.translation.z
    }

    fn check_pose(&self, pose: &PoseTransform) -> Result<(), RenderError> {
        let d = self.plane_distance(pose);
        if !(d >= MIN_PLANE_DISTANCE) {
            return Err(RenderError::DegeneratePose(format!(
                "camera center at distance {d:.3e} m from the plane"
            )));
        }
        // At least one pixel ray has to reach the plane in front of the camera.
        let k_inv = self.intrinsics.inverse_matrix();
        let (w, h) = (self.intrinsics.width as f64 - 1.0, self.intrinsics.height as f64 - 1.0);
        let visible = [(0.0, 0.0), (w, 0.0), (0.0, h), (w, h), (w * 0.5, h * 0.5)]
            .iter()
            .any(|&(u, v)| (pose.rotation * (k_inv * Vector3::new(u, v, 1.0))).z > MIN_RAY_Z);
        if !visible {
            return Err(RenderError::DegeneratePose(
                "the plane is not in front of the camera".into(),
            ));
        }
        Ok(())
    }

    /// Map from rendered-view pixels back to reference-image pixels, with a
    /// positive homogeneous scale for rays that hit the plane in front of the camera.
    ///
    /// `K (I + t nᵀ / (d − t_z)) R K⁻¹` for camera pose `(R, t)`.
    pub fn view_to_reference(&self, pose: &PoseTransform) -> Result<Matrix3<f64>, RenderError> {
        self.check_pose(pose)?;
        let t = pose.translation;
        let d_eff = self.plane_distance(pose);
        let mut m = Matrix3::identity();
        m.set_column(2, &(Vector3::z() + t / d_eff));
        Ok(self.intrinsics.matrix() * m * pose.rotation * self.intrinsics.inverse_matrix())
    }

    /// Reference-image coordinates sampled by every output pixel, row-major.
    /// `None` where the pixel ray misses the plane.
    pub fn source_coordinates(&self, pose: &PoseTransform) -> Result<Vec<Option<(f64, f64)>>, RenderError> {
        let g = self.view_to_reference(pose)?;
        let (w, h) = (self.intrinsics.width, self.intrinsics.height);
        let mut out = Vec::with_capacity(w as usize * h as usize);
        for v in 0..h {
            for u in 0..w {
                let p = g * Vector3::new(u as f64, v as f64, 1.0);
                out.push((p.z > MIN_RAY_Z).then(|| (p.x / p.z, p.y / p.z)));
            }
        }
        Ok(out)
    }

    /// Sample the reference image at the given coordinates (bilinear, fill outside).
    pub fn render_from_coordinates(&self, coords: &[Option<(f64, f64)>]) -> ImageBuffer {
        let (w, h) = (self.intrinsics.width, self.intrinsics.height);
        assert_eq!(coords.len(), w as usize * h as usize);
        let pixels = coords
            .iter()
            .map(|c| {
                c.and_then(|(x, y)| self.reference_image.sample_bilinear(x, y))
                    .map_or(self.fill_value, quantize)
            })
            .collect();
        ImageBuffer::new(w, h, pixels).expect("dimensions match intrinsics")
    }

    pub fn render_view(&self, pose: &PoseTransform) -> Result<ImageBuffer, RenderError> {
        let g = self.view_to_reference(pose)?;
        let (w, h) = (self.intrinsics.width, self.intrinsics.height);
        let mut pixels = Vec::with_capacity(w as usize * h as usize);
        for v in 0..h {
            // p(u) = row_base + u·col0, no per-pixel matrix product
            let base = g * Vector3::new(0.0, v as f64, 1.0);
            let step = g.column(0).into_owned();
            for u in 0..w {
                let p = base + step * u as f64;
                let value = if p.z > MIN_RAY_Z {
                    self.reference_image
                        .sample_bilinear(p.x / p.z, p.y / p.z)
                        .map_or(self.fill_value, quantize)
                } else {
                    self.fill_value
                };
                pixels.push(value);
            }
        }
        Ok(ImageBuffer::new(w, h, pixels).expect("dimensions match intrinsics"))
    }

    /// Forward homography: reference pixels to rendered-view pixels.
    pub fn homography_for_pose(&self, pose: &PoseTransform) -> Result<Homography, RenderError> {
        self.check_pose(pose)?;
        // cTc0 = (Rᵀ, −Rᵀt); H = K (cRc0 + ctc0 nᵀ / d) K⁻¹ with n = (0, 0, 1)
        let inv = pose.inverse();
        let mut m = inv.rotation;
        let col = m.column(2) + inv.translation / self.depth0;
        m.set_column(2, &col);
        Homography::new(self.intrinsics.matrix() * m * self.intrinsics.inverse_matrix())
    }
}

#[inline]
fn quantize(v: f64) -> u8 {
    (v + 0.5).floor().clamp(0.0, 255.0) as u8
}

/// 3×3 projective map, normalized so that `h33 = 1` whenever `h33 ≠ 0`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Homography {
    pub matrix: Matrix3<f64>,
}

impl Homography {
    pub fn new(matrix: Matrix3<f64>) -> Result<Self, RenderError> {
        let matrix = if matrix[(2, 2)].abs() > 1e-15 {
            matrix / matrix[(2, 2)]
        } else {
            matrix
        };
        if !(matrix.determinant().abs() > 1e-12) {
            return Err(RenderError::DegeneratePose("singular homography".into()));
        }
        Ok(Self { matrix })
    }

    pub fn identity() -> Self {
        Self {
            matrix: Matrix3::identity(),
        }
    }

    pub fn map(&self, x: f64, y: f64) -> (f64, f64) {
        let p = self.matrix * Vector3::new(x, y, 1.0);
        (p.x / p.z, p.y / p.z)
    }

    pub fn compose(&self, other: &Homography) -> Result<Homography, RenderError> {
        Homography::new(self.matrix * other.matrix)
    }

    pub fn inverse(&self) -> Option<Homography> {
        self.matrix.try_inverse().and_then(|m| Homography::new(m).ok())
    }
}

/// Sum of squared intensity differences.
pub fn ssd(a: &ImageBuffer, b: &ImageBuffer) -> Result<f64, RenderError> {
    if a.dimensions() != b.dimensions() {
        return Err(RenderError::DimensionMismatch {
            a: a.dimensions(),
            b: b.dimensions(),
        });
    }
    Ok(a.pixels()
        .iter()
        .zip(b.pixels())
        .map(|(&p, &q)| {
            let d = p as f64 - q as f64;
            d * d
        })
        .sum())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Pose6;
    use crate::raster::procedural_texture;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn scene(size: u32, depth: f64) -> PlanarScene {
        let k = CameraIntrinsics::centered(size, size, size as f64);
        PlanarScene::new(procedural_texture(size, size, 5), k, depth, DEFAULT_FILL_VALUE).unwrap()
    }

    fn random_pose(rng: &mut ChaCha8Rng, depth: f64) -> PoseTransform {
        let mut g = |s: f64| (rng.random::<f64>() * 2.0 - 1.0) * s;
        let p = Pose6::new(
            Vector3::new(g(0.2 * depth), g(0.2 * depth), g(0.4 * depth)),
            Vector3::new(g(0.25), g(0.25), g(0.6)),
        );
        PoseTransform::from_pose6(&p)
    }

    /// Ray-casting oracle for a reference pixel: lift onto the plane, reproject.
    fn project_reference_pixel(s: &PlanarScene, pose: &PoseTransform, u: f64, v: f64) -> (f64, f64) {
        let k = s.intrinsics();
        let (x, y) = k.normalize(u, v);
        let on_plane = Vector3::new(x, y, 1.0) * s.depth0();
        let in_cam = pose.inverse().transform_point(&on_plane);
        k.project(&in_cam)
    }

    #[test]
    fn identity_pose_gives_identity_homography() {
        let s = scene(32, 0.3);
        let h = s.homography_for_pose(&PoseTransform::identity()).unwrap();
        assert!((h.matrix - Matrix3::identity()).amax() < 1e-15);
    }

    #[test]
    fn halving_depth_scales_by_two_about_principal_point() {
        let s = scene(32, 0.4);
        let pose = PoseTransform::from_translation(Vector3::new(0.0, 0.0, 0.2));
        let h = s.homography_for_pose(&pose).unwrap();
        let (cx, cy) = (s.intrinsics().cx, s.intrinsics().cy);
        let expected = Matrix3::new(2.0, 0.0, -cx, 0.0, 2.0, -cy, 0.0, 0.0, 1.0);
        assert!((h.matrix - expected).amax() < 1e-12, "{}", h.matrix);
    }

    #[test]
    fn homography_agrees_with_ray_casting() {
        let s = scene(64, 0.5);
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mut worst: f64 = 0.0;
        for _ in 0..100 {
            let pose = random_pose(&mut rng, s.depth0());
            let h = s.homography_for_pose(&pose).unwrap();
            for (u, v) in [(0.0, 0.0), (63.0, 0.0), (17.0, 40.0), (63.0, 63.0), (31.5, 31.5)] {
                let (a, b) = h.map(u, v);
                let (x, y) = project_reference_pixel(&s, &pose, u, v);
                worst = worst.max((a - x).abs()).max((b - y).abs());
            }
        }
        assert!(worst < 1e-6, "worst discrepancy {worst}");
    }

    #[test]
    fn degenerate_poses_are_rejected() {
        let s = scene(16, 0.2);
        let on_plane = PoseTransform::from_translation(Vector3::new(0.0, 0.0, 0.2));
        assert!(matches!(
            s.homography_for_pose(&on_plane),
            Err(RenderError::DegeneratePose(_))
        ));
        assert!(matches!(s.render_view(&on_plane), Err(RenderError::DegeneratePose(_))));
        let behind = PoseTransform::from_translation(Vector3::new(0.0, 0.0, 0.5));
        assert!(s.render_view(&behind).is_err());
        let facing_away = PoseTransform::from_pose6(&Pose6::new(
            Vector3::zeros(),
            Vector3::new(std::f64::consts::PI, 0.0, 0.0),
        ));
        assert!(s.render_view(&facing_away).is_err());
    }

    #[test]
    fn reference_pose_reproduces_reference_image() {
        let s = scene(48, 0.2);
        let img = s.render_view(&PoseTransform::identity()).unwrap();
        assert_eq!(&img, s.reference_image());
    }

    #[test]
    fn constant_scene_renders_constant_where_in_bounds() {
        let k = CameraIntrinsics::centered(40, 30, 40.0);
        let s = PlanarScene::new(ImageBuffer::filled(40, 30, 93), k, 0.3, 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..10 {
            let pose = random_pose(&mut rng, 0.3);
            let img = s.render_view(&pose).unwrap();
            assert!(img.pixels().iter().all(|&p| p == 93 || p == 0));
        }
    }

    #[test]
    fn double_warp_matches_direct_warp() {
        // First view is fronto-parallel, so it is itself a valid reference for the same plane.
        let s = scene(96, 0.5);
        let p1 = PoseTransform::from_translation(Vector3::new(0.01, -0.02, 0.1));
        let first = s.render_view(&p1).unwrap();
        let s2 = PlanarScene::new(first, *s.intrinsics(), s.plane_distance(&p1), 0).unwrap();
        let p2 = PoseTransform::from_pose6(&Pose6::new(
            Vector3::new(-0.01, 0.005, 0.02),
            Vector3::new(0.03, -0.02, 0.1),
        ));
        let twice = s2.render_view(&p2).unwrap();
        let direct = s.render_view(&p1.compose(&p2)).unwrap();
        let coords = s2.source_coordinates(&p2).unwrap();
        let (mut sum, mut n) = (0.0, 0usize);
        for (i, c) in coords.iter().enumerate() {
            let inside = c.is_some_and(|(x, y)| x >= 2.0 && y >= 2.0 && x <= 93.0 && y <= 93.0);
            if inside {
                sum += (twice.pixels()[i] as f64 - direct.pixels()[i] as f64).abs();
                n += 1;
            }
        }
        assert!(n > 1000);
        assert!(sum / (n as f64) < 2.0, "mean abs {}", sum / n as f64);
    }

    #[test]
    fn warp_composition_chains() {
        let s = scene(64, 0.5);
        let p1 = PoseTransform::from_translation(Vector3::new(0.02, 0.01, -0.1));
        let s2 = PlanarScene::new(s.reference_image().clone(), *s.intrinsics(), s.plane_distance(&p1), 0).unwrap();
        let p2 = PoseTransform::from_pose6(&Pose6::new(
            Vector3::new(0.05, -0.01, 0.03),
            Vector3::new(0.1, 0.2, -0.3),
        ));
        let direct = s.homography_for_pose(&p1.compose(&p2)).unwrap();
        let chained = s2
            .homography_for_pose(&p2)
            .unwrap()
            .compose(&s.homography_for_pose(&p1).unwrap())
            .unwrap();
        assert!((direct.matrix - chained.matrix).amax() < 1e-9);
    }

    #[test]
    fn ssd_examples() {
        let a = procedural_texture(20, 10, 2);
        assert_eq!(ssd(&a, &a).unwrap(), 0.0);
        let p = ImageBuffer::new(1, 1, vec![10]).unwrap();
        let q = ImageBuffer::new(1, 1, vec![13]).unwrap();
        assert_eq!(ssd(&p, &q).unwrap(), 9.0);
        assert!(matches!(
            ssd(&a, &ImageBuffer::filled(10, 20, 0)),
            Err(RenderError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn ssd_increases_with_perturbation_magnitude() {
        let base = ImageBuffer::filled(32, 32, 128);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let pattern: Vec<f64> = (0..base.len()).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
        let mut prev = -1.0;
        for mag in [0.0, 5.0, 10.0, 20.0, 40.0, 80.0, 120.0] {
            let pixels = pattern.iter().map(|n| (128.0 + n * mag).round() as u8).collect();
            let img = ImageBuffer::new(32, 32, pixels).unwrap();
            let v = ssd(&base, &img).unwrap();
            assert!(v > prev, "ssd {v} at magnitude {mag}");
            prev = v;
        }
    }
}
