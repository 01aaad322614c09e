//! Gaussian pose draws around the reference pose.

use nalgebra::Vector3;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::geometry::{Pose6, PoseTransform};

/// Per-axis Gaussian draw of `(tx, ty, tz, rx, ry, rz)` composed onto `mean_pose`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoseSamplerConfig {
    /// `[tx, ty, tz, rx, ry, rz]`, meters and degrees.
    #[serde(default)]
    pub mean_pose: Pose6,
    /// meters
    pub std_translation: [f64; 3],
    /// degrees
    pub std_rotation: [f64; 3],
    pub count: usize,
}

/// Fine-stage standard deviations relative to the coarse stage.
pub const FINE_SCALE: f64 = 0.01;

impl PoseSamplerConfig {
    /// 10,000 draws with standard deviations (1 cm, 1 cm, 1 cm, 10°, 10°, 20°).
    pub fn coarse_default() -> Self {
        Self {
            mean_pose: Pose6::zero(),
            std_translation: [0.01, 0.01, 0.01],
            std_rotation: [10.0, 10.0, 20.0],
            count: 10_000,
        }
    }

    /// 1,000 draws at 1/100 of the coarse standard deviations.
    pub fn fine_default() -> Self {
        Self::coarse_default().scaled(FINE_SCALE, 1_000)
    }

    pub fn scaled(&self, factor: f64, count: usize) -> Self {
        Self {
            mean_pose: self.mean_pose,
            std_translation: self.std_translation.map(|s| s * factor),
            std_rotation: self.std_rotation.map(|s| s * factor),
            count,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        let stds = self.std_translation.iter().chain(&self.std_rotation);
        if stds.clone().any(|s| !(*s >= 0.0 && s.is_finite())) {
            return Err("standard deviations must be finite and non-negative".into());
        }
        if self.count == 0 {
            return Err("count must be at least 1".into());
        }
        if !self.mean_pose.is_finite() {
            return Err("mean pose must be finite".into());
        }
        Ok(())
    }

    /// One draw.
    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> PoseTransform {
        let mut n = |s: f64| s * rng.sample::<f64, _>(StandardNormal);
        let [sx, sy, sz] = self.std_translation;
        let [rx, ry, rz] = self.std_rotation.map(f64::to_radians);
        let t = Vector3::new(n(sx), n(sy), n(sz));
        let r = Vector3::new(n(rx), n(ry), n(rz));
        let delta = PoseTransform::from_pose6(&Pose6::new(t, r));
        PoseTransform::from_pose6(&self.mean_pose).compose(&delta)
    }
}

pub fn sample_poses<R: Rng + ?Sized>(cfg: &PoseSamplerConfig, rng: &mut R) -> Vec<PoseTransform> {
    (0..cfg.count).map(|_| cfg.draw(rng)).collect()
}
