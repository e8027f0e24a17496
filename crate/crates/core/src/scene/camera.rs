use serde::{Deserialize, Serialize};

use super::SceneError;
use crate::field::Ray;

/// Tolerance on `RᵀR = I` for camera rotations.
pub const ORTHONORMAL_TOL: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub width: usize,
    pub height: usize,
    /// Focal length in pixels.
    pub focal: f64,
    pub cx: f64,
    pub cy: f64,
}

impl CameraIntrinsics {
    /// Centered principal point with the given horizontal field of view.
    pub fn from_fov(width: usize, height: usize, fov_x_degrees: f64) -> Self {
        let focal = 0.5 * width as f64 / (0.5 * fov_x_degrees.to_radians()).tan();
        Self {
            width,
            height,
            focal,
            cx: width as f64 / 2.0,
            cy: height as f64 / 2.0,
        }
    }

    pub fn validate(&self) -> Result<(), SceneError> {
        if self.width == 0 || self.height == 0 {
            return Err(SceneError::Camera("image dimensions must be positive".into()));
        }
        if !(self.focal > 0.0) || !self.focal.is_finite() {
            return Err(SceneError::Camera(format!("focal length {}", self.focal)));
        }
        Ok(())
    }
}

/// Camera-to-world transform. The camera looks down its local −z axis with
/// +y up.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[[f64; 4]; 4]", into = "[[f64; 4]; 4]")]
pub struct Pose {
    matrix: [[f64; 4]; 4],
}

impl TryFrom<[[f64; 4]; 4]> for Pose {
    type Error = SceneError;

    fn try_from(m: [[f64; 4]; 4]) -> Result<Self, SceneError> {
        Pose::new(m)
    }
}

impl From<Pose> for [[f64; 4]; 4] {
    fn from(p: Pose) -> Self {
        p.matrix
    }
}

impl Pose {
    pub fn new(matrix: [[f64; 4]; 4]) -> Result<Self, SceneError> {
        if matrix.iter().flatten().any(|v| !v.is_finite()) {
            return Err(SceneError::MalformedMatrix("non-finite entry".into()));
        }
        if matrix[3] != [0.0, 0.0, 0.0, 1.0] {
            return Err(SceneError::MalformedMatrix(format!(
                "last row must be (0, 0, 0, 1), got {:?}",
                matrix[3]
            )));
        }
        for i in 0..3 {
            for j in 0..3 {
                let dot: f64 = (0..3).map(|k| matrix[k][i] * matrix[k][j]).sum();
                let expected = if i == j { 1.0 } else { 0.0 };
                if (dot - expected).abs() > ORTHONORMAL_TOL {
                    return Err(SceneError::NotOrthonormal {
                        deviation: (dot - expected).abs(),
                    });
                }
            }
        }
        Ok(Self { matrix })
    }

    pub fn identity() -> Self {
        let mut m = [[0.0; 4]; 4];
        for (i, row) in m.iter_mut().enumerate() {
            row[i] = 1.0;
        }
        Self { matrix: m }
    }

    /// Camera at `eye` looking at `target`.
    pub fn look_at(eye: [f64; 3], target: [f64; 3], up: [f64; 3]) -> Result<Self, SceneError> {
        let back = normalize(sub(eye, target))
            .ok_or_else(|| SceneError::Camera("eye coincides with target".into()))?;
        let right = normalize(cross(up, back))
            .ok_or_else(|| SceneError::Camera("up is parallel to the view direction".into()))?;
        let true_up = cross(back, right);
        let mut m = [[0.0; 4]; 4];
        for r in 0..3 {
            m[r] = [right[r], true_up[r], back[r], eye[r]];
        }
        m[3] = [0.0, 0.0, 0.0, 1.0];
        Self::new(m)
    }

    /// Camera on a sphere of `radius` around the origin, looking at it.
    pub fn orbit(azimuth_deg: f64, elevation_deg: f64, radius: f64) -> Result<Self, SceneError> {
        let (az, el) = (azimuth_deg.to_radians(), elevation_deg.to_radians());
        let eye = [radius * el.cos() * az.cos(), radius * el.cos() * az.sin(), radius * el.sin()];
        Self::look_at(eye, [0.0; 3], [0.0, 0.0, 1.0])
    }

    pub fn matrix(&self) -> &[[f64; 4]; 4] {
        &self.matrix
    }

    pub fn translation(&self) -> [f64; 3] {
        [self.matrix[0][3], self.matrix[1][3], self.matrix[2][3]]
    }

    pub fn rotate(&self, v: [f64; 3]) -> [f64; 3] {
        [0, 1, 2].map(|r| (0..3).map(|c| self.matrix[r][c] * v[c]).sum())
    }
}

/// `azimuths` evenly spaced orbit poses at each elevation.
pub fn orbit_ring(azimuths: usize, elevations: &[f64], radius: f64, offset_deg: f64) -> Vec<Pose> {
    let mut poses = Vec::with_capacity(azimuths * elevations.len());
    for &el in elevations {
        for a in 0..azimuths {
            let az = offset_deg + 360.0 * a as f64 / azimuths as f64;
            poses.push(Pose::orbit(az, el, radius).expect("orbit poses are well formed"));
        }
    }
    poses
}

/// World-space ray through the center of pixel `(u, v)`, clipped to the scene
/// bounds `[-1, 1]³`. Returns `None` when the ray misses the bounds.
pub fn camera_ray(
    intrinsics: &CameraIntrinsics,
    pose: &Pose,
    u: usize,
    v: usize,
) -> Result<Option<Ray>, SceneError> {
    if u >= intrinsics.width || v >= intrinsics.height {
        return Err(SceneError::PixelOutOfBounds { u, v });
    }
    let local = [
        (u as f64 + 0.5 - intrinsics.cx) / intrinsics.focal,
        -(v as f64 + 0.5 - intrinsics.cy) / intrinsics.focal,
        -1.0,
    ];
    let dir = normalize(pose.rotate(local)).expect("camera direction has z = -1");
    let origin = pose.translation();
    Ok(clip_to_bounds(origin, dir).map(|(near, far)| Ray {
        origin,
        direction: dir,
        near,
        far,
    }))
}

/// Slab intersection of a ray with `[-1, 1]³`, restricted to `t ≥ 0`.
pub fn clip_to_bounds(origin: [f64; 3], dir: [f64; 3]) -> Option<(f64, f64)> {
    let mut near = 0.0f64;
    let mut far = f64::INFINITY;
    for d in 0..3 {
        if dir[d].abs() < 1e-12 {
            if origin[d].abs() > 1.0 {
                return None;
            }
            continue;
        }
        let a = (-1.0 - origin[d]) / dir[d];
        let b = (1.0 - origin[d]) / dir[d];
        near = near.max(a.min(b));
        far = far.min(a.max(b));
    }
    (near < far).then_some((near, far))
}

pub(crate) fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub(crate) fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub(crate) fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

pub(crate) fn normalize(v: [f64; 3]) -> Option<[f64; 3]> {
    let n = dot(v, v).sqrt();
    (n > 1e-12).then(|| v.map(|x| x / n))
}
