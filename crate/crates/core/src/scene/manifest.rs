//! JSON dataset manifests in the common "transforms" layout: one file per
//! instance with an intrinsics block and frames holding a relative image
//! path and a row-major 4×4 camera-to-world matrix. A dataset index lists
//! the instance manifests.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{CameraIntrinsics, Image, InstanceData, Pose, SceneDataset, SceneError, SceneSpec, View};

#[derive(Serialize, Deserialize)]
struct FrameRecord {
    file_path: String,
    transform_matrix: Vec<Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
struct InstanceRecord {
    id: String,
    intrinsics: CameraIntrinsics,
    frames: Vec<FrameRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    scene: Option<SceneSpec>,
}

#[derive(Serialize, Deserialize)]
struct IndexRecord {
    instances: Vec<String>,
}

pub const INDEX_FILE: &str = "dataset.json";
pub const INSTANCE_FILE: &str = "transforms.json";

/// Writes `dir/dataset.json` plus one `dir/<id>/transforms.json` and its
/// images per instance. Returns the index path.
pub fn save_manifest(dataset: &SceneDataset, dir: &Path) -> Result<PathBuf, SceneError> {
    let mut entries = Vec::new();
    for inst in &dataset.instances {
        let rel = format!("{}/{INSTANCE_FILE}", inst.id);
        save_instance(inst, &dir.join(&rel))?;
        entries.push(rel);
    }
    let index = dir.join(INDEX_FILE);
    write_json(&index, &IndexRecord { instances: entries })?;
    Ok(index)
}

/// Writes one instance manifest; images go next to it under their `file` paths.
pub fn save_instance(inst: &InstanceData, path: &Path) -> Result<(), SceneError> {
    let base = path.parent().unwrap_or(Path::new("."));
    let frames = inst
        .views
        .iter()
        .map(|v| {
            let img_path = base.join(&v.file);
            if let Some(parent) = img_path.parent() {
                fs::create_dir_all(parent).map_err(|e| io_err(parent, e))?;
            }
            v.image.write_png(&img_path)?;
            Ok(FrameRecord {
                file_path: v.file.clone(),
                transform_matrix: v.pose.matrix().iter().map(|r| r.to_vec()).collect(),
            })
        })
        .collect::<Result<Vec<_>, SceneError>>()?;
    write_json(
        path,
        &InstanceRecord {
            id: inst.id.clone(),
            intrinsics: inst.intrinsics,
            frames,
            scene: inst.spec.clone(),
        },
    )
}

/// Loads either a dataset index or a single instance manifest, validating
/// every pose and decoding every image.
pub fn load_manifest(path: &Path) -> Result<SceneDataset, SceneError> {
    let value = read_json(path)?;
    if value.get("instances").is_some() {
        let index: IndexRecord = serde_json::from_value(value).map_err(|e| malformed(path, e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let instances = index
            .instances
            .iter()
            .map(|rel| load_instance(&base.join(rel)))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(SceneDataset { instances })
    } else {
        Ok(SceneDataset {
            instances: vec![parse_instance(path, value)?],
        })
    }
}

pub fn load_instance(path: &Path) -> Result<InstanceData, SceneError> {
    let value = read_json(path)?;
    parse_instance(path, value)
}

fn parse_instance(path: &Path, value: serde_json::Value) -> Result<InstanceData, SceneError> {
    let rec: InstanceRecord = serde_json::from_value(value).map_err(|e| malformed(path, e))?;
    rec.intrinsics.validate()?;
    let base = path.parent().unwrap_or(Path::new("."));
    let views = rec
        .frames
        .par_iter()
        .map(|f| {
            let pose = Pose::new(parse_matrix(&f.transform_matrix)?)?;
            let image = Image::read_png(&base.join(&f.file_path))?;
            if image.width != rec.intrinsics.width || image.height != rec.intrinsics.height {
                return Err(SceneError::ImageSize {
                    path: base.join(&f.file_path),
                    expected: (rec.intrinsics.width, rec.intrinsics.height),
                    got: (image.width, image.height),
                });
            }
            Ok(View {
                pose,
                image,
                file: f.file_path.clone(),
            })
        })
        .collect::<Result<Vec<_>, SceneError>>()?;
    if let Some(spec) = &rec.scene {
        spec.validate()?;
    }
    Ok(InstanceData {
        id: rec.id,
        intrinsics: rec.intrinsics,
        views,
        spec: rec.scene,
    })
}

fn parse_matrix(rows: &[Vec<f64>]) -> Result<[[f64; 4]; 4], SceneError> {
    if rows.len() != 4 || rows.iter().any(|r| r.len() != 4) {
        return Err(SceneError::MalformedMatrix("transform_matrix must be 4x4".into()));
    }
    let mut m = [[0.0; 4]; 4];
    for (r, row) in rows.iter().enumerate() {
        m[r].copy_from_slice(row);
    }
    Ok(m)
}

fn read_json(path: &Path) -> Result<serde_json::Value, SceneError> {
    if !path.exists() {
        return Err(SceneError::MissingFile(path.to_path_buf()));
    }
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    serde_json::from_str(&text).map_err(|e| malformed(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), SceneError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| io_err(parent, e))?;
    }
    let text = serde_json::to_string_pretty(value).map_err(|e| malformed(path, e))?;
    fs::write(path, text).map_err(|e| io_err(path, e))
}

fn io_err(path: &Path, e: std::io::Error) -> SceneError {
    SceneError::Io {
        path: path.to_path_buf(),
        reason: e.to_string(),
    }
}

fn malformed(path: &Path, e: serde_json::Error) -> SceneError {
    SceneError::Malformed(format!("{}: {e}", path.display()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{desk_scenes, generate_synthetic_dataset, orbit_ring};

    fn small_dataset() -> SceneDataset {
        let i = CameraIntrinsics::from_fov(12, 10, 40.0);
        generate_synthetic_dataset(&desk_scenes()[..2], &orbit_ring(3, &[20.0], 3.0, 0.0), &i).unwrap()
    }

    #[test]
    fn round_trip_preserves_dataset() {
        let dir = tempfile::tempdir().unwrap();
        let ds = small_dataset();
        let index = save_manifest(&ds, dir.path()).unwrap();
        let back = load_manifest(&index).unwrap();
        let mut expected = ds.clone();
        for inst in &mut expected.instances {
            for v in &mut inst.views {
                v.image = v.image.quantized();
            }
        }
        assert_eq!(back, expected);
        let single = load_manifest(&dir.path().join("instance_001").join(INSTANCE_FILE)).unwrap();
        assert_eq!(single.instances[0], expected.instances[1]);
    }

    fn minimal(dir: &Path, matrix: &str, image: bool) -> PathBuf {
        if image {
            Image::filled(2, 2, [1.0; 3]).write_png(&dir.join("v.png")).unwrap();
        }
        let text = format!(
            r#"{{"id":"a","intrinsics":{{"width":2,"height":2,"focal":2.0,"cx":1.0,"cy":1.0}},
               "frames":[{{"file_path":"v.png","transform_matrix":{matrix}}}]}}"#
        );
        let p = dir.join("transforms.json");
        fs::write(&p, text).unwrap();
        p
    }

    const IDENTITY: &str = "[[1,0,0,0],[0,1,0,0],[0,0,1,3],[0,0,0,1]]";

    #[test]
    fn minimal_manifest_loads() {
        let dir = tempfile::tempdir().unwrap();
        let ds = load_manifest(&minimal(dir.path(), IDENTITY, true)).unwrap();
        assert_eq!(ds.instances.len(), 1);
        assert_eq!(ds.instances[0].views.len(), 1);
    }

    #[test]
    fn distinct_failures() {
        let dir = tempfile::tempdir().unwrap();
        let p = minimal(dir.path(), "[[2,0,0,0],[0,2,0,0],[0,0,2,3],[0,0,0,1]]", true);
        assert!(matches!(load_manifest(&p), Err(SceneError::NotOrthonormal { .. })));
        let p = minimal(dir.path(), "[[1,0,0],[0,1,0],[0,0,1]]", true);
        assert!(matches!(load_manifest(&p), Err(SceneError::MalformedMatrix(_))));
        let p = minimal(dir.path(), IDENTITY, false);
        fs::remove_file(dir.path().join("v.png")).unwrap();
        assert!(matches!(load_manifest(&p), Err(SceneError::MissingFile(_))));
        fs::write(dir.path().join("v.png"), b"garbage").unwrap();
        assert!(matches!(load_manifest(&p), Err(SceneError::ImageDecode { .. })));
        assert!(matches!(
            load_manifest(&dir.path().join("absent.json")),
            Err(SceneError::MissingFile(_))
        ));
        fs::write(dir.path().join("bad.json"), "{ nope").unwrap();
        assert!(matches!(
            load_manifest(&dir.path().join("bad.json")),
            Err(SceneError::Malformed(_))
        ));
    }
}
