//! Run configuration: one TOML file covering every stage of the pipeline.

use std::path::{Path, PathBuf};

use radcam_core::calibnet::{LossConfig, ModelConfig};
use radcam_core::cascade::TrainConfig;
use radcam_core::dataset::{GenerationConfig, SplitCounts};
use radcam_core::geometry::DecalRanges;
use radcam_core::scene::{RadarModel, RigSpec, SceneConfig};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

pub const SNAPSHOT_FILE: &str = "config.toml";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Static decalibrations for the static protocol.
    pub n_decals: usize,
    /// Window sizes for the temporal protocol.
    pub windows: Vec<usize>,
    /// Overlay images written per report.
    pub overlays: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            n_decals: 100,
            windows: vec![1, 5, 25],
            overlays: 8,
        }
    }
}

/// The second rig, evaluated without retraining.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneralizationConfig {
    pub rig: RigSpec,
    pub road_curvature: f64,
}

impl Default for GeneralizationConfig {
    fn default() -> Self {
        Self {
            rig: RigSpec::secondary(),
            road_curvature: 1.0 / 600.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Master seed; every random stream in a run derives from it.
    pub seed: u64,
    pub out: Option<PathBuf>,
    pub rig: RigSpec,
    pub scene: SceneConfig,
    pub radar: RadarModel,
    pub decalibration: DecalRanges,
    pub counts: SplitCounts,
    /// Decalibrated samples drawn per training frame.
    pub train_decals_per_frame: usize,
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub generalization: GeneralizationConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out: None,
            rig: RigSpec::primary(),
            scene: SceneConfig::default(),
            radar: RadarModel::default(),
            decalibration: DecalRanges::default(),
            counts: SplitCounts {
                train: 5000,
                val: 500,
                test: 500,
            },
            train_decals_per_frame: 1,
            model: ModelConfig::default(),
            loss: LossConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            generalization: GeneralizationConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        let mut cfg: Self = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.train.seed = cfg.seed;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run configuration serializes to TOML")
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.train.seed = seed;
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.generation().validate()?;
        self.rig.build()?;
        self.model.validate()?;
        self.loss.validate()?;
        self.train.validate()?;
        if self.eval.windows.contains(&0) {
            return Err(CliError::Config("eval.windows: window sizes must be at least 1".into()));
        }
        self.generalization_generation().validate()?;
        self.generalization.rig.build()?;
        Ok(())
    }

    pub fn generation(&self) -> GenerationConfig {
        GenerationConfig {
            rig: self.rig.clone(),
            scene: self.scene.clone(),
            radar: self.radar.clone(),
            decalibration: self.decalibration,
            counts: self.counts,
            seed: self.seed,
            train_decals_per_frame: self.train_decals_per_frame,
        }
    }

    /// Same scene and sensors, second rig, curved road.
    pub fn generalization_generation(&self) -> GenerationConfig {
        GenerationConfig {
            rig: self.generalization.rig.clone(),
            scene: SceneConfig {
                road_curvature: self.generalization.road_curvature,
                ..self.scene.clone()
            },
            ..self.generation()
        }
    }

    /// Write the snapshot that reproduces this run. The output location is
    /// left out so identical runs in different directories match byte for byte.
    pub fn write_snapshot(&self, dir: &Path) -> Result<(), CliError> {
        std::fs::create_dir_all(dir).map_err(|e| CliError::Io(format!("{}: {e}", dir.display())))?;
        let path = dir.join(SNAPSHOT_FILE);
        let snapshot = Self {
            out: None,
            ..self.clone()
        };
        std::fs::write(&path, snapshot.to_toml()).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_round_trip() {
        let cfg = RunConfig {
            seed: 42,
            out: Some("runs/a".into()),
            train: TrainConfig {
                seed: 42,
                ..TrainConfig::default()
            },
            ..RunConfig::default()
        };
        let back = RunConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn partial_file_fills_defaults() {
        let cfg = RunConfig::from_toml("seed = 7\n[scene]\nlane_count = 4\n").unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.train.seed, 7);
        assert_eq!(cfg.scene.lane_count, 4);
        assert_eq!(cfg.counts.train, 5000);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(matches!(RunConfig::from_toml("sed = 1\n"), Err(CliError::Config(_))));
    }

    #[test]
    fn zero_lanes_names_the_field() {
        let cfg = RunConfig::from_toml("[scene]\nlane_count = 0\n").unwrap();
        let err = cfg.validate().unwrap_err();
        assert!(err.to_string().contains("scene.lane_count"), "{err}");
    }
}
