//! Desk-scale presets: the bundled synthetic dataset and the model and
//! training settings sized for it.

use crate::field::{FieldConfig, RenderConfig};
use crate::hash_encoding::HashGridConfig;
use crate::hypernet::HypernetConfig;
use crate::scene::{desk_scenes, generate_synthetic_dataset, orbit_ring, CameraIntrinsics, Pose, SceneDataset, SceneError};
use crate::training::TrainConfig;

pub const IMAGE_SIZE: usize = 48;
pub const FOV_DEGREES: f64 = 40.0;
pub const CAMERA_RADIUS: f64 = 3.2;

pub fn intrinsics() -> CameraIntrinsics {
    CameraIntrinsics::from_fov(IMAGE_SIZE, IMAGE_SIZE, FOV_DEGREES)
}

/// Training views: 12 azimuths at 30° elevation.
pub fn train_poses() -> Vec<Pose> {
    orbit_ring(12, &[30.0], CAMERA_RADIUS, 0.0)
}

/// Held-out evaluation ring: 16 azimuths at 20° elevation, offset from the
/// training azimuths.
pub fn eval_poses() -> Vec<Pose> {
    orbit_ring(16, &[20.0], CAMERA_RADIUS, 11.25)
}

/// The four bundled instances rendered from [`train_poses`].
pub fn dataset() -> Result<SceneDataset, SceneError> {
    generate_synthetic_dataset(&desk_scenes(), &train_poses(), &intrinsics())
}

/// 8 levels of 2^10 two-feature entries, resolutions 4 to 64.
pub fn hash_grid() -> HashGridConfig {
    HashGridConfig {
        levels: 8,
        table_size: 1 << 10,
        features: 2,
        n_min: 4,
        n_max: 64,
    }
}

pub fn prior_config() -> HypernetConfig {
    HypernetConfig {
        field: FieldConfig::hash(hash_grid()),
        ..HypernetConfig::default()
    }
}

/// Same prior with the frequency-encoded field instead of hash tables.
pub fn posenc_prior_config() -> HypernetConfig {
    HypernetConfig {
        field: FieldConfig::frequency(10),
        ..HypernetConfig::default()
    }
}

pub fn train_config(seed: u64) -> TrainConfig {
    TrainConfig {
        steps: 1500,
        seed,
        ..TrainConfig::default()
    }
}

/// Deterministic rendering used for evaluation.
pub fn eval_render() -> RenderConfig {
    RenderConfig {
        samples_per_ray: 32,
        stratified: false,
        ..RenderConfig::default()
    }
}
