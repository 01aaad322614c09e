//! Pose estimators: `image → pose relative to I₀`.
//!
//! The oracle reads the ground truth and corrupts it on a schedule; the remote
//! estimator forwards images to a service speaking the framed protocol.

pub mod protocol;
mod remote;
mod server;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::geometry::{relative_pose, Pose6, PoseTransform};
use crate::raster::ImageBuffer;

pub use protocol::ProtocolError;
pub use remote::{RemoteEstimator, DEFAULT_TIMEOUT};
pub use server::{OracleServer, ServerConfig, ServerHandle};

#[derive(Debug, thiserror::Error)]
pub enum EstimatorError {
    #[error("estimator timed out after {0:?}")]
    Timeout(std::time::Duration),
    #[error("estimator protocol error: {0}")]
    Protocol(#[from] ProtocolError),
    #[error("connection to estimator lost: {0}")]
    ConnectionLost(String),
    #[error("estimator unreachable at {address}: {message}")]
    Unreachable { address: String, message: String },
    #[error("estimator reported: {0}")]
    Remote(String),
    #[error("no ground truth available for this image")]
    NoGroundTruth,
}

/// What the caller knows about the image being estimated.
#[derive(Clone, Copy, Debug, Default)]
pub struct EstimateContext {
    pub iteration: usize,
    /// Pose of the camera w.r.t. the reference camera; only oracles may look.
    pub truth: Option<PoseTransform>,
}

pub trait PoseEstimator {
    fn name(&self) -> &str;

    fn estimate(&mut self, image: &ImageBuffer, ctx: &EstimateContext) -> Result<Pose6, EstimatorError>;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutageMode {
    /// In-distribution nonsense drawn uniformly from the garbage range.
    Garbage,
    /// Repeat the last output before the window.
    Frozen,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutageWindow {
    pub start: usize,
    /// Exclusive.
    pub end: usize,
    pub mode: OutageMode,
}

impl OutageWindow {
    pub fn contains(&self, iteration: usize) -> bool {
        (self.start..self.end).contains(&iteration)
    }
}

fn default_garbage_range() -> Pose6 {
    Pose6::from_file_units([0.02, 0.02, 0.02, 20.0, 20.0, 40.0])
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorruptionSchedule {
    /// `[σ_t (m), σ_r (deg)]`, per axis.
    #[serde(default)]
    pub noise_std: [f64; 2],
    /// Composed on the left of every estimate, `[m, m, m, deg, deg, deg]`.
    #[serde(default)]
    pub bias: Pose6,
    #[serde(default)]
    pub outage_windows: Vec<OutageWindow>,
    /// Half-widths of the uniform garbage draw, `[m, m, m, deg, deg, deg]`.
    #[serde(default = "default_garbage_range")]
    pub garbage_range: Pose6,
}

impl Default for CorruptionSchedule {
    fn default() -> Self {
        Self {
            noise_std: [0.0, 0.0],
            bias: Pose6::zero(),
            outage_windows: Vec::new(),
            garbage_range: default_garbage_range(),
        }
    }
}

impl CorruptionSchedule {
    pub fn validate(&self) -> Result<(), String> {
        if self.noise_std.iter().any(|s| !(*s >= 0.0 && s.is_finite())) {
            return Err("noise_std must be finite and non-negative".into());
        }
        if !self.bias.is_finite() || !self.garbage_range.is_finite() {
            return Err("bias and garbage_range must be finite".into());
        }
        let mut prev_end = 0;
        for (i, w) in self.outage_windows.iter().enumerate() {
            if w.start >= w.end {
                return Err(format!("outage window {i} is empty ({}..{})", w.start, w.end));
            }
            if i > 0 && w.start < prev_end {
                return Err(format!("outage window {i} overlaps or precedes window {}", i - 1));
            }
            prev_end = w.end;
        }
        Ok(())
    }

    pub fn outage_at(&self, iteration: usize) -> Option<OutageMode> {
        self.outage_windows
            .iter()
            .find(|w| w.contains(iteration))
            .map(|w| w.mode)
    }

    pub fn is_clean(&self) -> bool {
        self.noise_std == [0.0, 0.0] && self.bias == Pose6::zero() && self.outage_windows.is_empty()
    }
}

/// Corrupt the true relative pose per `schedule`.
///
/// `previous` is the last output before the current call, used by frozen
/// outages; with none available a frozen call behaves like a normal one.
pub fn oracle_estimate<R: Rng + ?Sized>(
    true_relative: &Pose6,
    schedule: &CorruptionSchedule,
    iteration: usize,
    rng: &mut R,
    previous: Option<&Pose6>,
) -> Pose6 {
    match (schedule.outage_at(iteration), previous) {
        (Some(OutageMode::Garbage), _) => {
            let g = schedule.garbage_range.to_array();
            let mut out = [0.0; 6];
            for (o, half) in out.iter_mut().zip(g) {
                *o = if half > 0.0 { rng.random_range(-half..half) } else { 0.0 };
            }
            Pose6::from_array(out)
        }
        (Some(OutageMode::Frozen), Some(p)) => *p,
        _ => {
            let biased = if schedule.bias == Pose6::zero() {
                *true_relative
            } else {
                let b = PoseTransform::from_pose6(&schedule.bias);
                b.compose(&PoseTransform::from_pose6(true_relative)).to_pose6()
            };
            let [st, sr] = schedule.noise_std;
            if st == 0.0 && sr == 0.0 {
                return biased;
            }
            let sr = sr.to_radians();
            let mut n = |s: f64| {
                if s > 0.0 {
                    s * rng.sample::<f64, _>(StandardNormal)
                } else {
                    0.0
                }
            };
            let dt = Vector3::new(n(st), n(st), n(st));
            let dr = Vector3::new(n(sr), n(sr), n(sr));
            Pose6::new(biased.t + dt, biased.theta_u + dr)
        }
    }
}

/// Ground-truth estimator with scheduled corruption.
#[derive(Clone, Debug)]
pub struct OracleEstimator {
    schedule: CorruptionSchedule,
    rng: ChaCha8Rng,
    last: Option<Pose6>,
}

impl OracleEstimator {
    pub fn new(schedule: CorruptionSchedule, seed: u64) -> Self {
        Self {
            schedule,
            rng: ChaCha8Rng::seed_from_u64(seed),
            last: None,
        }
    }

    pub fn schedule(&self) -> &CorruptionSchedule {
        &self.schedule
    }

    pub fn estimate_truth(&mut self, truth: &Pose6, iteration: usize) -> Pose6 {
        let out = oracle_estimate(truth, &self.schedule, iteration, &mut self.rng, self.last.as_ref());
        if self.schedule.outage_at(iteration).is_none() {
            self.last = Some(out);
        }
        out
    }
}

impl PoseEstimator for OracleEstimator {
    fn name(&self) -> &str {
        "oracle"
    }

    fn estimate(&mut self, _image: &ImageBuffer, ctx: &EstimateContext) -> Result<Pose6, EstimatorError> {
        let truth = ctx.truth.ok_or(EstimatorError::NoGroundTruth)?;
        Ok(self.estimate_truth(&truth.to_pose6(), ctx.iteration))
    }
}

/// Estimate `ᶜ⁰T_c*` from the desired image once.
pub fn desired_pose_from_image(
    desired_image: &ImageBuffer,
    estimator: &mut dyn PoseEstimator,
    ctx: &EstimateContext,
) -> Result<Pose6, EstimatorError> {
    estimator.estimate(desired_image, ctx)
}

/// `Δ*r` from two estimates relative to I₀.
pub fn delta_from_estimates(desired: &Pose6, current: &Pose6) -> Pose6 {
    relative_pose(&PoseTransform::from_pose6(desired), &PoseTransform::from_pose6(current))
}
