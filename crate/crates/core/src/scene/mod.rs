//! Cameras, images, synthetic ground truth, dataset manifests and checkpoints.

mod camera;
pub mod checkpoint;
mod image;
mod manifest;
mod synthetic;

use std::path::PathBuf;

use thiserror::Error;

pub use camera::{camera_ray, clip_to_bounds, orbit_ring, CameraIntrinsics, Pose, ORTHONORMAL_TOL};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointError, ModelKind, Persist};
pub use image::Image;
pub use manifest::{load_instance, load_manifest, save_instance, save_manifest, INDEX_FILE, INSTANCE_FILE};
pub use synthetic::{desk_scenes, generate_synthetic_dataset, Primitive, SceneSpec, Shape};

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("file not found: {0}")]
    MissingFile(PathBuf),
    #[error("{path}: {reason}")]
    Io { path: PathBuf, reason: String },
    #[error("malformed manifest: {0}")]
    Malformed(String),
    #[error("malformed transform matrix: {0}")]
    MalformedMatrix(String),
    #[error("rotation is not orthonormal (deviation {deviation:.3e})")]
    NotOrthonormal { deviation: f64 },
    #[error("cannot decode image {path}: {reason}")]
    ImageDecode { path: PathBuf, reason: String },
    #[error("image {path} is {got:?}, expected {expected:?}")]
    ImageSize {
        path: PathBuf,
        expected: (usize, usize),
        got: (usize, usize),
    },
    #[error("camera: {0}")]
    Camera(String),
    #[error("pixel ({u}, {v}) is outside the image")]
    PixelOutOfBounds { u: usize, v: usize },
    #[error("scene spec has no primitives to render")]
    EmptySpec,
    #[error("primitive {0} is outside the scene bounds or has an invalid size or color")]
    InvalidPrimitive(usize),
}

/// One posed view of an instance.
#[derive(Clone, Debug, PartialEq)]
pub struct View {
    pub pose: Pose,
    pub image: Image,
    /// Image path relative to the instance manifest.
    pub file: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct InstanceData {
    pub id: String,
    pub intrinsics: CameraIntrinsics,
    pub views: Vec<View>,
    pub spec: Option<SceneSpec>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SceneDataset {
    pub instances: Vec<InstanceData>,
}

impl SceneDataset {
    pub fn view_count(&self) -> usize {
        self.instances.iter().map(|i| i.views.len()).sum()
    }
}
