use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::camera::{camera_ray, dot, normalize, sub, CameraIntrinsics, Pose};
use super::{Image, InstanceData, SceneDataset, SceneError, View};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Shape {
    Sphere { radius: f64 },
    /// Axis-aligned box given by its half extents.
    Box { half_extents: [f64; 3] },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Primitive {
    pub shape: Shape,
    pub center: [f64; 3],
    pub albedo: [f32; 3],
}

impl Primitive {
    pub fn sphere(center: [f64; 3], radius: f64, albedo: [f32; 3]) -> Self {
        Self {
            shape: Shape::Sphere { radius },
            center,
            albedo,
        }
    }

    pub fn cuboid(center: [f64; 3], half_extents: [f64; 3], albedo: [f32; 3]) -> Self {
        Self {
            shape: Shape::Box { half_extents },
            center,
            albedo,
        }
    }

    fn extent(&self) -> [f64; 3] {
        match self.shape {
            Shape::Sphere { radius } => [radius; 3],
            Shape::Box { half_extents } => half_extents,
        }
    }

    /// Nearest positive hit distance and outward normal.
    fn intersect(&self, origin: [f64; 3], dir: [f64; 3]) -> Option<(f64, [f64; 3])> {
        let o = sub(origin, self.center);
        match self.shape {
            Shape::Sphere { radius } => {
                let b = dot(o, dir);
                let c = dot(o, o) - radius * radius;
                let disc = b * b - c;
                if disc < 0.0 {
                    return None;
                }
                let sq = disc.sqrt();
                let t = if -b - sq > 0.0 { -b - sq } else { -b + sq };
                (t > 0.0).then(|| {
                    let p = [0, 1, 2].map(|d| o[d] + t * dir[d]);
                    (t, p.map(|v| v / radius))
                })
            }
            Shape::Box { half_extents } => {
                let mut near = f64::NEG_INFINITY;
                let mut far = f64::INFINITY;
                let mut axis = 0;
                let mut sign = 1.0;
                for d in 0..3 {
                    if dir[d].abs() < 1e-12 {
                        if o[d].abs() > half_extents[d] {
                            return None;
                        }
                        continue;
                    }
                    let a = (-half_extents[d] - o[d]) / dir[d];
                    let b = (half_extents[d] - o[d]) / dir[d];
                    let (lo, hi) = if a < b { (a, b) } else { (b, a) };
                    if lo > near {
                        near = lo;
                        axis = d;
                        sign = if dir[d] > 0.0 { -1.0 } else { 1.0 };
                    }
                    far = far.min(hi);
                }
                if near > far || far <= 0.0 || near <= 0.0 {
                    return None;
                }
                let mut n = [0.0; 3];
                n[axis] = sign;
                Some((near, n))
            }
        }
    }
}

/// Analytic scene made of flat-colored primitives inside `[-1, 1]³`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub primitives: Vec<Primitive>,
    /// Simple directional diffuse shading instead of flat albedo.
    #[serde(default)]
    pub lambert: bool,
}

const LIGHT_DIR: [f64; 3] = [0.48, 0.36, 0.8];

impl SceneSpec {
    pub fn validate(&self) -> Result<(), SceneError> {
        for (i, p) in self.primitives.iter().enumerate() {
            let e = p.extent();
            let inside = (0..3).all(|d| p.center[d] - e[d] >= -1.0 && p.center[d] + e[d] <= 1.0);
            let positive = e.iter().all(|v| *v > 0.0);
            let color_ok = p.albedo.iter().all(|c| (0.0..=1.0).contains(c));
            if !inside || !positive || !color_ok {
                return Err(SceneError::InvalidPrimitive(i));
            }
        }
        Ok(())
    }

    /// Color seen along a ray, or `None` if nothing is hit.
    pub fn shade(&self, origin: [f64; 3], dir: [f64; 3]) -> Option<[f32; 3]> {
        let mut best: Option<(f64, [f64; 3], [f32; 3])> = None;
        for p in &self.primitives {
            if let Some((t, n)) = p.intersect(origin, dir) {
                if best.is_none_or(|(bt, _, _)| t < bt) {
                    best = Some((t, n, p.albedo));
                }
            }
        }
        best.map(|(_, n, albedo)| {
            if self.lambert {
                let l = normalize(LIGHT_DIR).unwrap();
                let k = (0.3 + 0.7 * dot(n, l).max(0.0)) as f32;
                albedo.map(|c| c * k)
            } else {
                albedo
            }
        })
    }

    /// Ground-truth view on a white background.
    pub fn render(&self, intrinsics: &CameraIntrinsics, pose: &Pose) -> Result<Image, SceneError> {
        intrinsics.validate()?;
        let mut img = Image::filled(intrinsics.width, intrinsics.height, [1.0; 3]);
        for v in 0..intrinsics.height {
            for u in 0..intrinsics.width {
                if let Some(ray) = camera_ray(intrinsics, pose, u, v)? {
                    if let Some(c) = self.shade(ray.origin, ray.direction) {
                        img.set_pixel(u, v, c);
                    }
                }
            }
        }
        Ok(img)
    }

    /// Whether a scene-space point lies inside any primitive.
    pub fn contains(&self, x: [f64; 3]) -> bool {
        self.primitives.iter().any(|p| {
            let o = sub(x, p.center);
            match p.shape {
                Shape::Sphere { radius } => dot(o, o) <= radius * radius,
                Shape::Box { half_extents } => (0..3).all(|d| o[d].abs() <= half_extents[d]),
            }
        })
    }
}

/// Renders every spec from every pose. Instance ids are `instance_000`, ….
pub fn generate_synthetic_dataset(
    specs: &[SceneSpec],
    poses: &[Pose],
    intrinsics: &CameraIntrinsics,
) -> Result<SceneDataset, SceneError> {
    if specs.is_empty() {
        return Err(SceneError::EmptySpec);
    }
    intrinsics.validate()?;
    let instances = specs
        .iter()
        .enumerate()
        .map(|(n, spec)| {
            spec.validate()?;
            let views = poses
                .par_iter()
                .enumerate()
                .map(|(k, pose)| {
                    Ok(View {
                        pose: *pose,
                        image: spec.render(intrinsics, pose)?,
                        file: format!("images/{k:03}.png"),
                    })
                })
                .collect::<Result<Vec<_>, SceneError>>()?;
            Ok(InstanceData {
                id: format!("instance_{n:03}"),
                intrinsics: *intrinsics,
                views,
                spec: Some(spec.clone()),
            })
        })
        .collect::<Result<Vec<_>, SceneError>>()?;
    Ok(SceneDataset { instances })
}

/// Four small object-like scenes used for desk experiments.
pub fn desk_scenes() -> Vec<SceneSpec> {
    let flat = |primitives| SceneSpec {
        primitives,
        lambert: false,
    };
    vec![
        flat(vec![Primitive::sphere([0.0, 0.0, 0.0], 0.55, [0.85, 0.2, 0.15])]),
        flat(vec![Primitive::cuboid([0.0, 0.0, 0.0], [0.45, 0.45, 0.45], [0.15, 0.35, 0.85])]),
        flat(vec![
            Primitive::cuboid([0.0, 0.0, -0.35], [0.5, 0.5, 0.12], [0.2, 0.7, 0.25]),
            Primitive::sphere([0.0, 0.0, 0.2], 0.35, [0.95, 0.8, 0.1]),
        ]),
        flat(vec![
            Primitive::cuboid([-0.3, 0.0, 0.0], [0.15, 0.5, 0.5], [0.55, 0.25, 0.7]),
            Primitive::cuboid([0.3, 0.0, 0.0], [0.15, 0.5, 0.5], [0.95, 0.55, 0.15]),
        ]),
    ]
}
