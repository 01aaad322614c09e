use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::geometry::PoseTransform;
use crate::perturb::occlusion::check_corpus;
use crate::perturb::{
    composite_occlusion, extract_cluster, sample_from_segmentation, slic_segment, GaussianLight, LightingConfig,
    OcclusionRecord, SlicParams, SuperpixelLabels,
};
use crate::raster::{procedural_texture, ImageBuffer};
use crate::render::PlanarScene;
use crate::scene::{ImageSource, SceneConfig};

use super::manifest::{
    image_file_name, DatasetManifest, ManifestHeader, PerturbationRecord, SampleRecord, Samplers, Stage, StageCounts,
    Units, IMAGE_DIR, MANIFEST_FILE, ROTATION_CONVENTION, SCHEMA_VERSION,
};
use super::sampler::PoseSamplerConfig;
use super::{pose_loss, DatasetError};

pub const LOSS_BETA: f64 = 0.01;
const MAX_POSE_ATTEMPTS: usize = 100;

/// Uniform ranges `[lo, hi]` for randomized lighting.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LightingRanges {
    pub global_gain: [f64; 2],
    pub global_bias: [f64; 2],
    pub light_count: [usize; 2],
    /// Peak of the summed light field; split evenly between the lights.
    pub amplitude: [f64; 2],
    /// Light spread as a fraction of the image width (x) and height (y).
    pub sigma_fraction: [f64; 2],
}

impl Default for LightingRanges {
    fn default() -> Self {
        Self {
            global_gain: [0.7, 1.3],
            global_bias: [-25.0, 25.0],
            light_count: [1, 3],
            amplitude: [0.6, 1.4],
            sigma_fraction: [0.5, 1.5],
        }
    }
}

impl LightingRanges {
    fn validate(&self) -> Result<(), String> {
        let ordered = |r: &[f64; 2]| r[0].is_finite() && r[1].is_finite() && r[0] <= r[1];
        if !ordered(&self.global_gain) || self.global_gain[0] < 0.0 {
            return Err("lighting.global_gain must be an ordered non-negative range".into());
        }
        if !ordered(&self.global_bias) {
            return Err("lighting.global_bias must be an ordered range".into());
        }
        if self.light_count[0] > self.light_count[1] {
            return Err("lighting.light_count must be an ordered range".into());
        }
        if !ordered(&self.amplitude) || self.amplitude[0] < 0.0 {
            return Err("lighting.amplitude must be an ordered non-negative range".into());
        }
        if !ordered(&self.sigma_fraction) || self.sigma_fraction[0] <= 0.0 {
            return Err("lighting.sigma_fraction must be an ordered positive range".into());
        }
        Ok(())
    }

    pub fn sample<R: Rng + ?Sized>(&self, dims: (u32, u32), rng: &mut R) -> LightingConfig {
        let mut u = |r: [f64; 2]| {
            if r[0] == r[1] {
                r[0]
            } else {
                rng.random_range(r[0]..r[1])
            }
        };
        let global_gain = u(self.global_gain);
        let global_bias = u(self.global_bias);
        let n = rng.random_range(self.light_count[0]..=self.light_count[1]);
        let (w, h) = (dims.0 as f64, dims.1 as f64);
        let lights = (0..n)
            .map(|_| {
                let mut u = |r: [f64; 2]| {
                    if r[0] == r[1] {
                        r[0]
                    } else {
                        rng.random_range(r[0]..r[1])
                    }
                };
                GaussianLight {
                    x0: u([0.0, w - 1.0]),
                    y0: u([0.0, h - 1.0]),
                    amplitude: u(self.amplitude) / n as f64,
                    sigma_x: u(self.sigma_fraction) * w,
                    sigma_y: u(self.sigma_fraction) * h,
                }
            })
            .collect();
        LightingConfig {
            global_gain,
            global_bias,
            lights,
        }
    }
}

/// Images occluders are cut from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum CorpusSource {
    /// Every PNG/JPEG below the directory, in sorted path order.
    Directory(PathBuf),
    Procedural {
        count: usize,
        side: u32,
        seed: u64,
    },
}

impl Default for CorpusSource {
    fn default() -> Self {
        CorpusSource::Procedural {
            count: 16,
            side: 128,
            seed: 0x0cc1,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OcclusionPolicy {
    pub corpus: CorpusSource,
    pub slic: SlicParams,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PerturbationPolicy {
    pub lighting_probability: f64,
    pub occlusion_probability: f64,
    pub lighting: LightingRanges,
    pub occlusion: OcclusionPolicy,
}

impl Default for PerturbationPolicy {
    fn default() -> Self {
        Self {
            lighting_probability: 0.5,
            occlusion_probability: 0.5,
            lighting: LightingRanges::default(),
            occlusion: OcclusionPolicy::default(),
        }
    }
}

impl PerturbationPolicy {
    pub fn none() -> Self {
        Self {
            lighting_probability: 0.0,
            occlusion_probability: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        for (name, p) in [
            ("lighting_probability", self.lighting_probability),
            ("occlusion_probability", self.occlusion_probability),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(format!("{name} must lie in [0, 1], got {p}"));
            }
        }
        if self.occlusion.slic.cluster_count == 0 {
            return Err("occlusion.slic.cluster_count must be positive".into());
        }
        self.lighting.validate()
    }
}

/// Everything `build_dataset` needs; the JSON form of a dataset config file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub scene: SceneConfig,
    #[serde(default = "PoseSamplerConfig::coarse_default")]
    pub coarse: PoseSamplerConfig,
    #[serde(default = "PoseSamplerConfig::fine_default")]
    pub fine: PoseSamplerConfig,
    #[serde(default)]
    pub perturbations: PerturbationPolicy,
    #[serde(default)]
    pub seed: u64,
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<(), DatasetError> {
        let mut problems = Vec::new();
        for (name, s) in [("coarse", &self.coarse), ("fine", &self.fine)] {
            if let Err(e) = s.validate() {
                problems.push(format!("{name}: {e}"));
            }
        }
        if let Err(e) = self.perturbations.validate() {
            problems.push(format!("perturbations: {e}"));
        }
        if !self.scene.intrinsics.is_valid() {
            problems.push("scene.intrinsics are invalid".into());
        }
        if !(self.scene.depth0 > 0.0 && self.scene.depth0.is_finite()) {
            problems.push(format!("scene.depth0 must be positive, got {}", self.scene.depth0));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(DatasetError::Config(problems.join("; ")))
        }
    }

    /// Make relative paths absolute against `base_dir`.
    pub fn resolved(&self, base_dir: &Path) -> DatasetConfig {
        let mut out = self.clone();
        if let Some(p) = self.scene.resolve_path(base_dir) {
            out.scene.reference_image = ImageSource::Path(p);
        }
        if let CorpusSource::Directory(d) = &self.perturbations.occlusion.corpus {
            if d.is_relative() {
                out.perturbations.occlusion.corpus = CorpusSource::Directory(base_dir.join(d));
            }
        }
        out
    }
}

/// One occluder source with its segmentation.
#[derive(Clone, Debug)]
pub struct CorpusEntry {
    pub name: String,
    pub image: ImageBuffer,
    pub labels: SuperpixelLabels,
}

pub fn load_corpus(policy: &OcclusionPolicy) -> Result<Vec<CorpusEntry>, DatasetError> {
    let named: Vec<(String, ImageBuffer)> = match &policy.corpus {
        CorpusSource::Procedural { count, side, seed } => (0..*count)
            .map(|i| {
                (
                    format!("procedural/{i:03}"),
                    procedural_texture(*side, *side, seed.wrapping_add(i as u64)),
                )
            })
            .collect(),
        CorpusSource::Directory(dir) => {
            if !dir.is_dir() {
                return Err(DatasetError::io(
                    dir,
                    std::io::Error::new(std::io::ErrorKind::NotFound, "occluder corpus directory not found"),
                ));
            }
            let mut out = Vec::new();
            for entry in walkdir::WalkDir::new(dir).sort_by_file_name() {
                let entry = entry.map_err(|e| {
                    let path = e.path().unwrap_or(dir).to_path_buf();
                    DatasetError::io(&path, e.into())
                })?;
                let ext = entry
                    .path()
                    .extension()
                    .and_then(|e| e.to_str())
                    .map(str::to_ascii_lowercase);
                if !entry.file_type().is_file() || !matches!(ext.as_deref(), Some("png" | "jpg" | "jpeg")) {
                    continue;
                }
                let rel = entry.path().strip_prefix(dir).unwrap_or(entry.path());
                let name = rel
                    .components()
                    .map(|c| c.as_os_str().to_string_lossy())
                    .collect::<Vec<_>>()
                    .join("/");
                out.push((name, ImageBuffer::load(entry.path())?));
            }
            out
        }
    };
    for (name, img) in &named {
        check_corpus(img).map_err(|e| DatasetError::Config(format!("occluder {name}: {e}")))?;
    }
    named
        .into_par_iter()
        .map(|(name, image)| {
            let labels = slic_segment(&image, &policy.slic)?;
            Ok(CorpusEntry { name, image, labels })
        })
        .collect()
}

fn sample_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64 + 1);
    rng
}

/// Draw the perturbations of one sample from its own stream.
fn draw_perturbations(
    policy: &PerturbationPolicy,
    corpus: &[CorpusEntry],
    dims: (u32, u32),
    rng: &mut ChaCha8Rng,
) -> Result<PerturbationRecord, DatasetError> {
    let mut record = PerturbationRecord::default();
    if rng.random_bool(policy.lighting_probability) {
        record.lighting = Some(policy.lighting.sample(dims, rng));
    }
    if rng.random_bool(policy.occlusion_probability) {
        if corpus.is_empty() {
            return Err(DatasetError::Config(
                "occlusion requested but the occluder corpus is empty".into(),
            ));
        }
        let entry = &corpus[rng.random_range(0..corpus.len())];
        let patch = sample_from_segmentation(&entry.image, &entry.labels, dims, rng)?;
        record.occlusion = Some(OcclusionRecord {
            corpus_file: entry.name.clone(),
            cluster_id: patch.cluster_id,
            anchor: [patch.anchor.0, patch.anchor.1],
        });
    }
    Ok(record)
}

/// Render `pose` and apply a recorded set of perturbations: lighting, then the occluder.
pub fn realize_sample(
    scene: &PlanarScene,
    pose: &PoseTransform,
    record: &PerturbationRecord,
    corpus: &[CorpusEntry],
) -> Result<ImageBuffer, DatasetError> {
    let mut img = scene.render_view(pose).map_err(|e| DatasetError::Scene(e.into()))?;
    if let Some(lighting) = &record.lighting {
        img = lighting.apply(&img);
    }
    if let Some(occ) = &record.occlusion {
        let entry = corpus
            .iter()
            .find(|c| c.name == occ.corpus_file)
            .ok_or_else(|| DatasetError::Config(format!("unknown occluder source {}", occ.corpus_file)))?;
        let patch = extract_cluster(
            &entry.image,
            &entry.labels,
            occ.cluster_id,
            (occ.anchor[0], occ.anchor[1]),
        )?;
        img = composite_occlusion(&img, &patch);
    }
    Ok(img)
}

fn draw_valid_pose(
    scene: &PlanarScene,
    cfg: &PoseSamplerConfig,
    rng: &mut ChaCha8Rng,
    index: usize,
) -> Result<PoseTransform, DatasetError> {
    for _ in 0..MAX_POSE_ATTEMPTS {
        let pose = cfg.draw(rng);
        if scene.view_to_reference(&pose).is_ok() {
            return Ok(pose);
        }
    }
    Err(DatasetError::DegeneratePose {
        index,
        attempts: MAX_POSE_ATTEMPTS,
    })
}

/// Sample, render, perturb and write a dataset into `out_dir`.
///
/// Relative paths in `cfg` are resolved against `base_dir`. `workers = 0` uses
/// the global thread pool.
pub fn build_dataset(
    cfg: &DatasetConfig,
    base_dir: &Path,
    out_dir: &Path,
    workers: usize,
) -> Result<DatasetManifest, DatasetError> {
    cfg.validate()?;
    let cfg = cfg.resolved(base_dir);
    let run = || build_resolved(&cfg, out_dir);
    if workers == 0 {
        run()
    } else {
        rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build()
            .map_err(|e| DatasetError::Config(format!("worker pool: {e}")))?
            .install(run)
    }
}

fn build_resolved(cfg: &DatasetConfig, out_dir: &Path) -> Result<DatasetManifest, DatasetError> {
    let scene = cfg.scene.build(Path::new("."))?;
    let dims = scene.reference_image().dimensions();
    let policy = &cfg.perturbations;
    let corpus = if policy.occlusion_probability > 0.0 {
        load_corpus(&policy.occlusion)?
    } else {
        Vec::new()
    };

    let mut pose_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut poses = Vec::with_capacity(cfg.coarse.count + cfg.fine.count);
    for (stage, sampler) in [(Stage::Coarse, &cfg.coarse), (Stage::Fine, &cfg.fine)] {
        for _ in 0..sampler.count {
            let pose = draw_valid_pose(&scene, sampler, &mut pose_rng, poses.len())?;
            poses.push((stage, pose));
        }
    }

    let image_dir = out_dir.join(IMAGE_DIR);
    std::fs::create_dir_all(&image_dir).map_err(|e| DatasetError::io(&image_dir, e))?;

    let samples = poses
        .par_iter()
        .enumerate()
        .map(|(index, (stage, pose))| {
            let mut rng = sample_rng(cfg.seed, index);
            let perturbations = draw_perturbations(policy, &corpus, dims, &mut rng)?;
            let img = realize_sample(&scene, pose, &perturbations, &corpus)?;
            let file = image_file_name(index);
            img.save_png(out_dir.join(&file))?;
            Ok(SampleRecord {
                index,
                file,
                label: pose.to_pose6().to_file_units(),
                pose: pose.to_row_major_3x4(),
                stage: *stage,
                perturbations,
            })
        })
        .collect::<Result<Vec<_>, DatasetError>>()?;

    let manifest = DatasetManifest {
        header: ManifestHeader {
            schema_version: SCHEMA_VERSION,
            seed: cfg.seed,
            reference_image: cfg.scene.reference_image.describe(),
            intrinsics: *scene.intrinsics(),
            depth0_m: scene.depth0(),
            fill_value: scene.fill_value(),
            units: Units::default(),
            rotation_convention: ROTATION_CONVENTION.into(),
            stage_counts: StageCounts {
                coarse: cfg.coarse.count,
                fine: cfg.fine.count,
            },
            samplers: Samplers {
                coarse: cfg.coarse.clone(),
                fine: cfg.fine.clone(),
            },
            perturbations: policy.clone(),
        },
        samples,
    };
    manifest.write(&out_dir.join(MANIFEST_FILE))?;
    Ok(manifest)
}

/// Regenerate sample `index` from the manifest alone.
pub fn replay_sample(manifest: &DatasetManifest, index: usize) -> Result<ImageBuffer, DatasetError> {
    let h = &manifest.header;
    let record = manifest
        .samples
        .get(index)
        .ok_or_else(|| DatasetError::Config(format!("sample {index} not in manifest")))?;
    let scene_cfg = SceneConfig {
        reference_image: ImageSource::parse_description(&h.reference_image),
        intrinsics: h.intrinsics,
        depth0: h.depth0_m,
        fill_value: h.fill_value,
    };
    let scene = scene_cfg.build(Path::new("."))?;
    let corpus = if record.perturbations.occlusion.is_some() {
        load_corpus(&h.perturbations.occlusion)?
    } else {
        Vec::new()
    };
    realize_sample(&scene, &record.pose_transform(), &record.perturbations, &corpus)
}

#[derive(Serialize)]
struct LossCase {
    estimate: [f64; 6],
    label: [f64; 6],
    loss: f64,
}

#[derive(Serialize)]
struct LossFixture {
    beta: f64,
    units: Units,
    cases: Vec<LossCase>,
}

/// Write `count` random (estimate, label, loss) triples as JSON for other
/// implementations of the loss to check against.
pub fn write_loss_fixture(path: &Path, count: usize, seed: u64) -> Result<(), DatasetError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sampler = PoseSamplerConfig::coarse_default();
    let cases = (0..count)
        .map(|_| {
            let label = sampler.draw(&mut rng).to_pose6();
            let estimate = if rng.random_bool(0.05) {
                label
            } else {
                sampler.draw(&mut rng).to_pose6()
            };
            let loss = pose_loss(&estimate, &label, LOSS_BETA);
            LossCase {
                estimate: estimate.to_file_units(),
                label: label.to_file_units(),
                loss,
            }
        })
        .collect();
    let fixture = LossFixture {
        beta: LOSS_BETA,
        units: Units::default(),
        cases,
    };
    let text = serde_json::to_string_pretty(&fixture).expect("fixture serializes");
    std::fs::write(path, text).map_err(|e| DatasetError::io(path, e))
}
