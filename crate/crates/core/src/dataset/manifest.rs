//! Line-oriented dataset manifest: one header object, then one object per sample.

use std::fmt::Write as _;
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::geometry::{CameraIntrinsics, Pose6, PoseTransform};
use crate::perturb::{LightingConfig, OcclusionRecord};

use super::build::PerturbationPolicy;
use super::sampler::PoseSamplerConfig;
use super::DatasetError;

pub const SCHEMA_VERSION: u32 = 1;
pub const ROTATION_CONVENTION: &str = "angle_axis_composed";
pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const IMAGE_DIR: &str = "images";

/// Labels are agreed with the manifest's recorded poses to this precision.
const LABEL_TOLERANCE: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Units {
    pub translation: String,
    pub rotation: String,
}

impl Default for Units {
    fn default() -> Self {
        Self {
            translation: "m".into(),
            rotation: "deg".into(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageCounts {
    pub coarse: usize,
    pub fine: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Samplers {
    pub coarse: PoseSamplerConfig,
    pub fine: PoseSamplerConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestHeader {
    pub schema_version: u32,
    pub seed: u64,
    pub reference_image: String,
    pub intrinsics: CameraIntrinsics,
    pub depth0_m: f64,
    pub fill_value: u8,
    pub units: Units,
    pub rotation_convention: String,
    pub stage_counts: StageCounts,
    pub samplers: Samplers,
    pub perturbations: PerturbationPolicy,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Coarse,
    Fine,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PerturbationRecord {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lighting: Option<LightingConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub occlusion: Option<OcclusionRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleRecord {
    pub index: usize,
    /// Relative to the dataset directory.
    pub file: String,
    /// `[tx, ty, tz, rx, ry, rz]` of the camera w.r.t. the reference camera, m and deg.
    pub label: [f64; 6],
    /// Row-major `[R | t]` of the sampled camera pose in the reference frame.
    pub pose: [f64; 12],
    pub stage: Stage,
    #[serde(default)]
    pub perturbations: PerturbationRecord,
}

impl SampleRecord {
    pub fn label_pose6(&self) -> Pose6 {
        Pose6::from_file_units(self.label)
    }

    pub fn pose_transform(&self) -> PoseTransform {
        PoseTransform::from_row_major_3x4(&self.pose)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub header: ManifestHeader,
    pub samples: Vec<SampleRecord>,
}

/// Outcome of a successful validation.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ValidationReport {
    pub samples: usize,
    pub coarse: usize,
    pub fine: usize,
    pub lit: usize,
    pub occluded: usize,
}

pub fn image_file_name(index: usize) -> String {
    format!("{IMAGE_DIR}/{index:06}.png")
}

impl DatasetManifest {
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        out.push_str(&serde_json::to_string(&self.header).expect("header serializes"));
        out.push('\n');
        for s in &self.samples {
            out.push_str(&serde_json::to_string(s).expect("record serializes"));
            out.push('\n');
        }
        out
    }

    pub fn write(&self, path: &Path) -> Result<(), DatasetError> {
        std::fs::write(path, self.to_jsonl()).map_err(|e| DatasetError::io(path, e))
    }

    /// Check counts, unit tags, indices, label finiteness and consistency with the
    /// recorded poses, and (when `dataset_dir` is given) that every image exists.
    pub fn validate(&self, dataset_dir: Option<&Path>) -> Result<ValidationReport, DatasetError> {
        let mut problems = Vec::new();
        let h = &self.header;
        if h.schema_version != SCHEMA_VERSION {
            problems.push(format!("unsupported schema_version {}", h.schema_version));
        }
        if h.units != Units::default() {
            problems.push(format!(
                "units must be {{translation: m, rotation: deg}}, got {{{}, {}}}",
                h.units.translation, h.units.rotation
            ));
        }
        if h.rotation_convention != ROTATION_CONVENTION {
            problems.push(format!("unknown rotation_convention {:?}", h.rotation_convention));
        }
        if h.samplers.coarse.count != h.stage_counts.coarse || h.samplers.fine.count != h.stage_counts.fine {
            problems.push("stage_counts disagree with sampler counts".into());
        }
        let expected = h.stage_counts.coarse + h.stage_counts.fine;
        if self.samples.len() != expected {
            problems.push(format!(
                "{} samples listed, stage counts require {expected}",
                self.samples.len()
            ));
        }
        let (mut coarse, mut fine, mut lit, mut occluded) = (0, 0, 0, 0);
        for (i, s) in self.samples.iter().enumerate() {
            if s.index != i {
                problems.push(format!("sample at position {i} has index {}", s.index));
            }
            let expected_stage = if i < h.stage_counts.coarse {
                Stage::Coarse
            } else {
                Stage::Fine
            };
            if s.stage != expected_stage {
                problems.push(format!("sample {i}: stage {:?}, expected {expected_stage:?}", s.stage));
            }
            match s.stage {
                Stage::Coarse => coarse += 1,
                Stage::Fine => fine += 1,
            }
            lit += usize::from(s.perturbations.lighting.is_some());
            occluded += usize::from(s.perturbations.occlusion.is_some());
            if !s.label.iter().all(|v| v.is_finite()) {
                problems.push(format!("sample {i}: non-finite label {:?}", s.label));
            } else if !s.pose.iter().all(|v| v.is_finite()) || !s.pose_transform().is_valid() {
                problems.push(format!("sample {i}: pose is not a rigid transform"));
            } else {
                let recomputed = s.pose_transform().to_pose6().to_file_units();
                let worst = recomputed
                    .iter()
                    .zip(&s.label)
                    .map(|(a, b)| (a - b).abs())
                    .fold(0.0, f64::max);
                if worst > LABEL_TOLERANCE {
                    problems.push(format!("sample {i}: label disagrees with pose by {worst:.3e}"));
                }
            }
            if let Some(dir) = dataset_dir {
                let path = dir.join(&s.file);
                if !path.is_file() {
                    problems.push(format!("sample {i}: missing image {}", path.display()));
                }
            }
        }
        if problems.is_empty() {
            Ok(ValidationReport {
                samples: self.samples.len(),
                coarse,
                fine,
                lit,
                occluded,
            })
        } else {
            Err(DatasetError::Validation(problems))
        }
    }
}

pub fn read_manifest(path: &Path) -> Result<DatasetManifest, DatasetError> {
    let file = std::fs::File::open(path).map_err(|e| DatasetError::io(path, e))?;
    let mut lines = BufReader::new(file).lines().enumerate();
    let header: ManifestHeader = match lines.next() {
        Some((_, line)) => parse_line(&line.map_err(|e| DatasetError::io(path, e))?, 1)?,
        None => {
            return Err(DatasetError::Parse {
                line: 1,
                field: "header".into(),
                message: "empty manifest".into(),
            })
        }
    };
    let mut samples = Vec::new();
    for (i, line) in lines {
        let line = line.map_err(|e| DatasetError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        samples.push(parse_line(&line, i + 1)?);
    }
    Ok(DatasetManifest { header, samples })
}

pub fn parse_manifest_str(text: &str) -> Result<DatasetManifest, DatasetError> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let header = match lines.next() {
        Some((i, l)) => parse_line(l, i + 1)?,
        None => {
            return Err(DatasetError::Parse {
                line: 1,
                field: "header".into(),
                message: "empty manifest".into(),
            })
        }
    };
    let samples = lines.map(|(i, l)| parse_line(l, i + 1)).collect::<Result<_, _>>()?;
    Ok(DatasetManifest { header, samples })
}

/// Deserialize one JSON line, naming the offending field on failure.
pub(crate) fn parse_line<T: DeserializeOwned>(text: &str, line: usize) -> Result<T, DatasetError> {
    let value: serde_json::Value = serde_json::from_str(text).map_err(|e| DatasetError::Parse {
        line,
        field: field_before(text, e.column()).unwrap_or_else(|| "<syntax>".into()),
        message: e.to_string(),
    })?;
    serde_path_to_error::deserialize(value).map_err(|e| {
        let path = e.path().to_string();
        DatasetError::Parse {
            line,
            field: if path == "." { "<root>".into() } else { path },
            message: e.into_inner().to_string(),
        }
    })
}

/// Name of the last `"key":` appearing before byte column `column` (1-based).
fn field_before(text: &str, column: usize) -> Option<String> {
    let end = column.min(text.len());
    let prefix = text.get(..end)?;
    let mut search = prefix;
    while let Some(colon) = search.rfind(':') {
        let before = search[..colon].trim_end();
        if let Some(stripped) = before.strip_suffix('"') {
            if let Some(open) = stripped.rfind('"') {
                return Some(stripped[open + 1..].to_string());
            }
        }
        search = &search[..colon];
    }
    None
}

impl std::fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let mut s = String::new();
        let _ = write!(
            s,
            "{} samples ({} coarse, {} fine), {} lit, {} occluded",
            self.samples, self.coarse, self.fine, self.lit, self.occluded
        );
        f.write_str(&s)
    }
}
