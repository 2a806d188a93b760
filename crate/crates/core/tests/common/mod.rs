#![allow(dead_code)]

use std::sync::OnceLock;

use radcam_core::calibnet::ModelConfig;
use radcam_core::dataset::{generate_dataset, Dataset, GenerationConfig, SplitCounts};
use radcam_core::geometry::{CameraIntrinsics, DecalRanges};
use radcam_core::scene::{RadarModel, RigSpec, SceneConfig};

/// 64/16/16 samples from the primary rig, rotation-only decalibrations.
pub fn dataset() -> &'static Dataset {
    static DS: OnceLock<Dataset> = OnceLock::new();
    DS.get_or_init(|| {
        generate_dataset(&GenerationConfig {
            rig: RigSpec::primary(),
            scene: SceneConfig::default(),
            radar: RadarModel::default(),
            decalibration: DecalRanges {
                translation_sigma: 0.0,
                ..DecalRanges::default()
            },
            counts: SplitCounts {
                train: 64,
                val: 16,
                test: 16,
            },
            seed: 11,
            train_decals_per_frame: 1,
        })
        .unwrap()
    })
}

pub fn k() -> CameraIntrinsics {
    *dataset().intrinsics()
}

/// A narrow network that trains quickly.
pub fn small_model_config() -> ModelConfig {
    ModelConfig {
        backbone_channels: vec![4, 8, 8],
        mlpconv_maps: 8,
        embed_dim: 16,
        head: vec![64, 32, 4],
        ..ModelConfig::default()
    }
}
