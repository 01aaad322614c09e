//! Training-set generation: sampled poses, rendered views, perturbations, labels.

mod build;
mod manifest;
mod sampler;

use std::path::{Path, PathBuf};

pub use build::{
    build_dataset, load_corpus, realize_sample, replay_sample, write_loss_fixture, CorpusEntry, CorpusSource,
    DatasetConfig, LightingRanges, OcclusionPolicy, PerturbationPolicy, LOSS_BETA,
};
pub use manifest::{
    image_file_name, parse_manifest_str, read_manifest, DatasetManifest, ManifestHeader, PerturbationRecord,
    SampleRecord, Samplers, Stage, StageCounts, Units, ValidationReport, IMAGE_DIR, MANIFEST_FILE, ROTATION_CONVENTION,
    SCHEMA_VERSION,
};
pub use sampler::{sample_poses, PoseSamplerConfig, FINE_SCALE};

use crate::geometry::Pose6;
use crate::perturb::PerturbError;
use crate::raster::ImageError;
use crate::scene::SceneError;

#[derive(Debug, thiserror::Error)]
pub enum DatasetError {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error("line {line}, field `{field}`: {message}")]
    Parse {
        line: usize,
        field: String,
        message: String,
    },
    #[error("manifest invalid:\n  {}", .0.join("\n  "))]
    Validation(Vec<String>),
    #[error("sample {index}: no renderable pose after {attempts} draws")]
    DegeneratePose { index: usize, attempts: usize },
    #[error(transparent)]
    Perturb(#[from] PerturbError),
    #[error("config: {0}")]
    Config(String),
}

impl DatasetError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        DatasetError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    /// True for failures caused by the filesystem rather than by inputs.
    pub fn is_io(&self) -> bool {
        match self {
            DatasetError::Io { .. } => true,
            DatasetError::Image(e) | DatasetError::Scene(SceneError::Image(e)) => {
                !matches!(e, ImageError::BadLength { .. })
            }
            _ => false,
        }
    }
}

/// `‖t̂ − t‖ + β‖θû − θu‖`, translation in meters and rotation in degrees.
pub fn pose_loss(estimate: &Pose6, label: &Pose6, beta: f64) -> f64 {
    let e = estimate.to_file_units();
    let l = label.to_file_units();
    let norm = |r: std::ops::Range<usize>| r.map(|i| (e[i] - l[i]).powi(2)).sum::<f64>().sqrt();
    norm(0..3) + beta * norm(3..6)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn loss_examples() {
        let label = Pose6::from_file_units([0.01, -0.02, 0.03, 5.0, 1.0, -7.0]);
        assert_eq!(pose_loss(&label, &label, LOSS_BETA), 0.0);
        let t_err = Pose6::from_file_units([0.1, 0.0, 0.0, 0.0, 0.0, 0.0]);
        assert!((pose_loss(&t_err, &Pose6::zero(), 0.01) - 0.1).abs() < 1e-15);
        let r_err = Pose6::from_file_units([0.0, 0.0, 0.0, 10.0, 0.0, 0.0]);
        assert!((pose_loss(&r_err, &Pose6::zero(), 0.01) - 0.1).abs() < 1e-12);
        // 3-4-5 in both groups
        let both = Pose6::from_file_units([0.3, 0.4, 0.0, 0.0, 30.0, 40.0]);
        assert!((pose_loss(&both, &Pose6::zero(), 0.01) - 1.0).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn loss_is_nonnegative_and_symmetric(a in prop::array::uniform6(-1.0f64..1.0), b in prop::array::uniform6(-1.0f64..1.0)) {
            let (a, b) = (Pose6::from_array(a), Pose6::from_array(b));
            let l = pose_loss(&a, &b, LOSS_BETA);
            prop_assert!(l >= 0.0);
            prop_assert!((l - pose_loss(&b, &a, LOSS_BETA)).abs() < 1e-12);
            prop_assert_eq!(l == 0.0, a == b);
        }
    }
}
