//! Closed-loop servoing experiments on a simulated planar scene.
//!
//! Each iteration renders the current view, applies the scheduled image
//! perturbations, asks the estimator for the pose, computes the control twist
//! and moves the camera.

mod log;

use std::path::Path;
use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::control::{pbvs_velocity, photometric_velocity, ControlGains, PhotometricContext};
use crate::estimator::{
    delta_from_estimates, CorruptionSchedule, EstimateContext, EstimatorError, OracleEstimator, PoseEstimator,
    RemoteEstimator,
};
use crate::geometry::{relative_pose, Pose6, PoseTransform, Twist};
use crate::perturb::occlusion::check_corpus;
use crate::perturb::{
    composite_occlusion, extract_cluster, sample_from_segmentation, slic_segment, LightingConfig, OcclusionPatch,
    PerturbError, SlicParams,
};
use crate::raster::{procedural_texture, ImageBuffer};
use crate::render::{ssd, PlanarScene};
use crate::scene::{ImageSource, SceneConfig, SceneError};

pub use log::{
    export_csv, parse_csv, read_csv, summarize, write_csv, ExperimentLog, IterationRecord, LogError, Outcome,
    RunSummary, CSV_COLUMNS, FLAG_ESTIMATOR_FAILED, FLAG_LIGHTING, FLAG_OCCLUSION, FLAG_OUTAGE,
};

/// Consecutive in-threshold iterations required to declare convergence.
pub const CONVERGENCE_STREAK: usize = 10;
/// Error growth over the initial error that aborts a run.
pub const DIVERGENCE_FACTOR: f64 = 10.0;
/// Consecutive estimator failures tolerated before giving up.
pub const ESTIMATOR_RETRY_BUDGET: usize = 3;
const OCCLUDER_SIDE: u32 = 128;

#[derive(Debug, thiserror::Error)]
pub enum SimError {
    #[error("scenario: {0}")]
    Config(String),
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error(transparent)]
    Perturb(#[from] PerturbError),
    #[error(transparent)]
    Estimator(#[from] EstimatorError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum EstimatorSpec {
    Oracle {
        #[serde(default)]
        schedule: CorruptionSchedule,
    },
    Remote {
        address: String,
        #[serde(default = "default_timeout_ms")]
        timeout_ms: u64,
        /// Attach the true pose to requests, for test-mode oracle services.
        #[serde(default)]
        send_truth: bool,
    },
}

fn default_timeout_ms() -> u64 {
    2000
}

impl Default for EstimatorSpec {
    fn default() -> Self {
        EstimatorSpec::Oracle {
            schedule: CorruptionSchedule::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Controller {
    /// Pose-based law on the estimated relative pose.
    #[default]
    Pbvs,
    /// Direct photometric servoing on raw intensities; ignores the estimator.
    Photometric,
}

/// A superpixel cut from `source` and pasted into the camera image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OcclusionSpec {
    /// Procedural sources are 128×128.
    pub source: ImageSource,
    #[serde(default)]
    pub slic: SlicParams,
    /// Drawn from the scenario seed when absent.
    #[serde(default)]
    pub cluster_id: Option<u32>,
    #[serde(default)]
    pub anchor: Option<[u32; 2]>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduledPerturbation {
    pub start: usize,
    /// Exclusive.
    pub end: usize,
    #[serde(default)]
    pub lighting: Option<LightingConfig>,
    #[serde(default)]
    pub occlusion: Option<OcclusionSpec>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Thresholds {
    pub translation_m: f64,
    pub rotation_deg: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Self {
            translation_m: 1e-3,
            rotation_deg: 0.1,
        }
    }
}

fn default_dt() -> f64 {
    0.05
}

fn default_max_iterations() -> usize {
    1000
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub scene: SceneConfig,
    /// Start pose relative to the desired pose, `[m, m, m, deg, deg, deg]`.
    pub initial_offset: Pose6,
    /// Desired camera pose relative to the reference camera.
    #[serde(default)]
    pub desired_pose: Pose6,
    #[serde(default)]
    pub gains: ControlGains,
    /// seconds
    #[serde(default = "default_dt")]
    pub dt: f64,
    #[serde(default = "default_max_iterations")]
    pub max_iterations: usize,
    #[serde(default)]
    pub estimator: EstimatorSpec,
    #[serde(default)]
    pub perturbations: Vec<ScheduledPerturbation>,
    #[serde(default)]
    pub convergence: Thresholds,
    #[serde(default)]
    pub controller: Controller,
    #[serde(default)]
    pub seed: u64,
    /// Estimate the desired image every iteration instead of once.
    #[serde(default)]
    pub reestimate_desired: bool,
}

impl Scenario {
    pub fn nominal(scene: SceneConfig, initial_offset: Pose6) -> Self {
        Self {
            scene,
            initial_offset,
            desired_pose: Pose6::zero(),
            gains: ControlGains::default(),
            dt: default_dt(),
            max_iterations: default_max_iterations(),
            estimator: EstimatorSpec::default(),
            perturbations: Vec::new(),
            convergence: Thresholds::default(),
            controller: Controller::Pbvs,
            seed: 0,
            reestimate_desired: false,
        }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let mut problems = Vec::new();
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            problems.push(format!("dt must be positive, got {}", self.dt));
        }
        if self.max_iterations == 0 {
            problems.push("max_iterations must be at least 1".into());
        }
        let t = &self.convergence;
        if !(t.translation_m > 0.0 && t.rotation_deg > 0.0) {
            problems.push("convergence thresholds must be positive".into());
        }
        if !self.gains.is_valid() {
            problems.push("gains must be positive".into());
        }
        if !self.initial_offset.is_finite() || !self.desired_pose.is_finite() {
            problems.push("poses must be finite".into());
        }
        if let EstimatorSpec::Oracle { schedule } = &self.estimator {
            if let Err(e) = schedule.validate() {
                problems.push(format!("estimator schedule: {e}"));
            }
        }
        for (i, p) in self.perturbations.iter().enumerate() {
            if p.start >= p.end {
                problems.push(format!("perturbation {i}: empty window {}..{}", p.start, p.end));
            }
            if p.lighting.as_ref().is_some_and(|l| !l.is_valid()) {
                problems.push(format!("perturbation {i}: invalid lighting"));
            }
        }
        if !self.scene.intrinsics.is_valid() || !(self.scene.depth0 > 0.0) {
            problems.push("scene intrinsics or depth0 invalid".into());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(SimError::Config(problems.join("; ")))
        }
    }

    /// Make relative image paths absolute against `base_dir`.
    pub fn resolved(&self, base_dir: &Path) -> Scenario {
        let mut out = self.clone();
        if let Some(p) = self.scene.resolve_path(base_dir) {
            out.scene.reference_image = ImageSource::Path(p);
        }
        for p in &mut out.perturbations {
            if let Some(ImageSource::Path(path)) = p.occlusion.as_mut().map(|o| &mut o.source) {
                if path.is_relative() {
                    *path = base_dir.join(&*path);
                }
            }
        }
        out
    }

    pub fn build_estimator(&self) -> Result<Box<dyn PoseEstimator>, SimError> {
        Ok(match &self.estimator {
            EstimatorSpec::Oracle { schedule } => Box::new(OracleEstimator::new(schedule.clone(), self.seed)),
            EstimatorSpec::Remote {
                address,
                timeout_ms,
                send_truth,
            } => {
                Box::new(RemoteEstimator::connect(address, Duration::from_millis(*timeout_ms))?.with_truth(*send_truth))
            }
        })
    }
}

/// Image perturbations prepared for the loop.
struct ActivePerturbation {
    start: usize,
    end: usize,
    lighting: Option<LightingConfig>,
    occlusion: Option<OcclusionPatch>,
}

fn prepare_perturbations(
    specs: &[ScheduledPerturbation],
    dims: (u32, u32),
    seed: u64,
) -> Result<Vec<ActivePerturbation>, SimError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    specs
        .iter()
        .map(|s| {
            let occlusion = match &s.occlusion {
                None => None,
                Some(o) => {
                    let corpus = match &o.source {
                        ImageSource::Procedural { seed } => procedural_texture(OCCLUDER_SIDE, OCCLUDER_SIDE, *seed),
                        ImageSource::Path(p) => ImageBuffer::load(p).map_err(SceneError::from)?,
                    };
                    check_corpus(&corpus)?;
                    let labels = slic_segment(&corpus, &o.slic)?;
                    let drawn = sample_from_segmentation(&corpus, &labels, dims, &mut rng)?;
                    let cluster = o.cluster_id.unwrap_or(drawn.cluster_id);
                    let anchor = o.anchor.map_or(drawn.anchor, |a| (a[0], a[1]));
                    Some(extract_cluster(&corpus, &labels, cluster, anchor)?)
                }
            };
            Ok(ActivePerturbation {
                start: s.start,
                end: s.end,
                lighting: s.lighting.clone(),
                occlusion,
            })
        })
        .collect()
}

fn apply_perturbations(img: ImageBuffer, active: &[ActivePerturbation], iteration: usize) -> (ImageBuffer, u32) {
    let mut img = img;
    let mut flags = 0;
    for p in active.iter().filter(|p| (p.start..p.end).contains(&iteration)) {
        if let Some(l) = &p.lighting {
            img = l.apply(&img);
            flags |= FLAG_LIGHTING;
        }
        if let Some(o) = &p.occlusion {
            img = composite_occlusion(&img, o);
            flags |= FLAG_OCCLUSION;
        }
    }
    (img, flags)
}

fn exceeds(e: &Pose6, t: f64, r_deg: f64) -> bool {
    e.translation_norm() > t || e.rotation_angle().to_degrees() > r_deg
}

/// Run a scenario with the estimator it describes. Relative paths resolve
/// against `base_dir`.
pub fn run_experiment(scenario: &Scenario, base_dir: &Path) -> Result<ExperimentLog, SimError> {
    scenario.validate()?;
    let scenario = scenario.resolved(base_dir);
    let scene = scenario.scene.build(Path::new("."))?;
    let mut estimator = scenario.build_estimator()?;
    run_with(&scenario, &scene, estimator.as_mut())
}

/// Run several scenarios in parallel, one log each, in input order.
pub fn run_batch(scenarios: &[Scenario], base_dir: &Path) -> Vec<Result<ExperimentLog, SimError>> {
    scenarios.par_iter().map(|s| run_experiment(s, base_dir)).collect()
}

/// The loop itself, with a caller-provided scene and estimator.
pub fn run_with(
    scenario: &Scenario,
    scene: &PlanarScene,
    estimator: &mut dyn PoseEstimator,
) -> Result<ExperimentLog, SimError> {
    scenario.validate()?;
    let dims = scene.reference_image().dimensions();
    let active = prepare_perturbations(&scenario.perturbations, dims, scenario.seed)?;
    let schedule = match &scenario.estimator {
        EstimatorSpec::Oracle { schedule } => Some(schedule),
        EstimatorSpec::Remote { .. } => None,
    };

    let desired = PoseTransform::from_pose6(&scenario.desired_pose);
    let mut current = desired.compose(&PoseTransform::from_pose6(&scenario.initial_offset));
    let desired_image = scene.render_view(&desired).map_err(|e| SimError::Scene(e.into()))?;
    let photometric = PhotometricContext::new(*scene.intrinsics(), scene.plane_distance(&desired));

    let thresholds = scenario.convergence;
    let (eps_t, eps_r) = (thresholds.translation_m, thresholds.rotation_deg);
    let initial_error = relative_pose(&desired, &current);
    let diverge_t = DIVERGENCE_FACTOR * initial_error.translation_norm().max(eps_t);
    let diverge_r = DIVERGENCE_FACTOR * initial_error.rotation_angle().to_degrees().max(eps_r);

    let mut desired_estimate: Option<Pose6> = None;
    let mut failures = 0usize;
    let mut streak = 0usize;
    let mut records = Vec::with_capacity(scenario.max_iterations.min(100_000));
    let mut outcome = Outcome::MaxIterationsReached;

    for k in 0..scenario.max_iterations {
        let started = Instant::now();
        let error = relative_pose(&desired, &current);
        let raw = scene.render_view(&current).map_err(|e| SimError::Scene(e.into()))?;
        let (image, mut flags) = apply_perturbations(raw, &active, k);
        if schedule.is_some_and(|s| s.outage_at(k).is_some()) {
            flags |= FLAG_OUTAGE;
        }

        let (twist, estimate) = match scenario.controller {
            Controller::Photometric => {
                // a textureless view leaves the camera where it is
                let v = photometric_velocity(&image, &desired_image, &photometric, &scenario.gains)
                    .unwrap_or_else(|_| Twist::zero());
                (v, [f64::NAN; 6])
            }
            Controller::Pbvs => {
                let result = (|| -> Result<Pose6, EstimatorError> {
                    if desired_estimate.is_none() || scenario.reestimate_desired {
                        let ctx = EstimateContext {
                            iteration: k,
                            truth: Some(desired),
                        };
                        desired_estimate = Some(estimator.estimate(&desired_image, &ctx)?);
                    }
                    let ctx = EstimateContext {
                        iteration: k,
                        truth: Some(current),
                    };
                    let est = estimator.estimate(&image, &ctx)?;
                    Ok(delta_from_estimates(
                        desired_estimate.as_ref().expect("set above"),
                        &est,
                    ))
                })();
                match result {
                    Ok(delta) => {
                        failures = 0;
                        (pbvs_velocity(&delta, &scenario.gains), delta.to_file_units())
                    }
                    Err(e @ EstimatorError::NoGroundTruth) => return Err(e.into()),
                    Err(_) => {
                        failures += 1;
                        flags |= FLAG_ESTIMATOR_FAILED;
                        (Twist::zero(), [f64::NAN; 6])
                    }
                }
            }
        };

        let ssd_value = ssd(&image, &desired_image).map_err(|e| SimError::Scene(e.into()))?;
        records.push(IterationRecord {
            iter: k,
            error: error.to_file_units(),
            estimate,
            v_lin_norm: twist.linear.norm(),
            v_ang_norm: twist.angular.norm(),
            ssd: ssd_value,
            perturb_flags: flags,
            wall_ms: started.elapsed().as_secs_f64() * 1e3,
        });

        if failures >= ESTIMATOR_RETRY_BUDGET {
            outcome = Outcome::EstimatorUnavailable { at: k + 1 };
            break;
        }
        if exceeds(&error, diverge_t, diverge_r) {
            outcome = Outcome::Diverged { at: k + 1 };
            break;
        }
        streak = if exceeds(&error, eps_t, eps_r) { 0 } else { streak + 1 };
        if streak >= CONVERGENCE_STREAK {
            outcome = Outcome::Converged { at: k + 1 };
            break;
        }
        current = current.integrate_twist(&twist, scenario.dt);
    }
    Ok(ExperimentLog { records, outcome })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimator::{OutageMode, OutageWindow};
    use crate::geometry::CameraIntrinsics;

    fn scene_cfg() -> SceneConfig {
        SceneConfig::procedural(7, CameraIntrinsics::centered(64, 64, 64.0), 0.8)
    }

    fn large_offset() -> Pose6 {
        Pose6::from_file_units([0.01, -0.24, -0.09, -10.0, -16.0, -43.0])
    }

    #[test]
    fn zero_offset_converges_immediately() {
        let s = Scenario::nominal(scene_cfg(), Pose6::zero());
        let log = run_experiment(&s, Path::new(".")).unwrap();
        assert_eq!(log.outcome, Outcome::Converged { at: CONVERGENCE_STREAK });
        let sum = summarize(&log.records).unwrap();
        assert_eq!(sum.iterations, CONVERGENCE_STREAK);
        assert_eq!(sum.final_translation_error_m, 0.0);
        assert!(log.records.iter().all(|r| r.perturb_flags == 0));
    }

    #[test]
    fn large_offset_converges_monotonically() {
        let s = Scenario::nominal(scene_cfg(), large_offset());
        let log = run_experiment(&s, Path::new(".")).unwrap();
        let Outcome::Converged { at } = log.outcome else {
            panic!("{:?}", log.outcome)
        };
        assert!(at < 1000);
        let sum = summarize(&log.records).unwrap();
        assert!(sum.final_translation_error_m < 1e-3 && sum.final_rotation_error_deg < 0.1);
        for w in log.records.windows(2) {
            assert!(w[1].translation_error() < w[0].translation_error());
            assert!(w[1].rotation_error() < w[0].rotation_error());
        }
    }

    #[test]
    fn bias_cancels_in_closed_loop() {
        let mut s = Scenario::nominal(
            scene_cfg(),
            Pose6::from_file_units([0.02, 0.01, -0.03, 5.0, -4.0, 10.0]),
        );
        s.estimator = EstimatorSpec::Oracle {
            schedule: CorruptionSchedule {
                bias: Pose6::from_file_units([0.004, -0.002, 0.001, 2.0, 1.0, -3.0]),
                ..Default::default()
            },
        };
        s.convergence = Thresholds {
            translation_m: 1e-6,
            rotation_deg: 1e-4,
        };
        let log = run_experiment(&s, Path::new(".")).unwrap();
        assert!(matches!(log.outcome, Outcome::Converged { .. }), "{:?}", log.outcome);
    }

    #[test]
    fn max_iterations_and_determinism() {
        let mut s = Scenario::nominal(scene_cfg(), large_offset());
        s.max_iterations = 1;
        let log = run_experiment(&s, Path::new(".")).unwrap();
        assert_eq!(log.outcome, Outcome::MaxIterationsReached);
        assert_eq!(log.records.len(), 1);

        s.max_iterations = 60;
        s.estimator = EstimatorSpec::Oracle {
            schedule: CorruptionSchedule {
                noise_std: [0.005, 1.0],
                outage_windows: vec![OutageWindow {
                    start: 20,
                    end: 30,
                    mode: OutageMode::Garbage,
                }],
                ..Default::default()
            },
        };
        s.perturbations = vec![ScheduledPerturbation {
            start: 5,
            end: 15,
            lighting: Some(LightingConfig {
                global_gain: 1.2,
                global_bias: -10.0,
                lights: vec![],
            }),
            occlusion: Some(OcclusionSpec {
                source: ImageSource::Procedural { seed: 3 },
                slic: SlicParams::default(),
                cluster_id: None,
                anchor: None,
            }),
        }];
        let a = run_experiment(&s, Path::new(".")).unwrap();
        let b = run_experiment(&s, Path::new(".")).unwrap();
        assert!(a.same_as(&b));
        let flags: Vec<u32> = a.records.iter().map(|r| r.perturb_flags).collect();
        assert_eq!(flags[5], FLAG_LIGHTING | FLAG_OCCLUSION);
        assert_eq!(flags[25], FLAG_OUTAGE);
        assert_eq!(flags[40], 0);
    }

    #[test]
    fn runaway_gain_diverges() {
        let mut s = Scenario::nominal(scene_cfg(), Pose6::from_file_units([0.01, 0.0, 0.0, 0.0, 0.0, 0.0]));
        // λ·dt = 2.5 overshoots and grows each step
        s.gains = ControlGains {
            lambda: 50.0,
            max_linear_speed: 100.0,
            max_angular_speed: 100.0,
        };
        let log = run_experiment(&s, Path::new(".")).unwrap();
        assert!(matches!(log.outcome, Outcome::Diverged { .. }), "{:?}", log.outcome);
    }

    #[test]
    fn scenario_json_rejects_unknown_fields() {
        let ok = r#"{"scene": {"reference_image": {"procedural": {"seed": 1}}, "depth0": 0.8},
                     "initial_offset": [0.01, -0.24, -0.09, -10, -16, -43]}"#;
        let s: Scenario = serde_json::from_str(ok).unwrap();
        assert_eq!(s.dt, 0.05);
        assert_eq!(s.controller, Controller::Pbvs);
        let bad = ok.replace("\"initial_offset\"", "\"inital_offset\"");
        assert!(serde_json::from_str::<Scenario>(&bad).is_err());
    }

    #[test]
    fn missing_remote_is_an_error() {
        let addr = std::net::TcpListener::bind("127.0.0.1:0")
            .unwrap()
            .local_addr()
            .unwrap();
        let mut s = Scenario::nominal(scene_cfg(), large_offset());
        s.estimator = EstimatorSpec::Remote {
            address: addr.to_string(),
            timeout_ms: 200,
            send_truth: true,
        };
        assert!(matches!(
            run_experiment(&s, Path::new(".")),
            Err(SimError::Estimator(EstimatorError::Unreachable { .. }))
        ));
    }
}
