use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{direction_encode, field_forward, FieldConfig, FieldError, NerfParams};
use crate::scene::{camera_ray, CameraIntrinsics, Image, Pose};
use crate::tensor::{CustomOp, Real, Tape, Tensor, Var};

/// Rays rendered together on one tape when rendering without gradients.
const RENDER_CHUNK: usize = 512;

/// Slack allowed when mapping samples that sit on the scene boundary.
const BOUNDARY_EPS: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ray {
    pub origin: [f64; 3],
    pub direction: [f64; 3],
    pub near: f64,
    pub far: f64,
}

impl Ray {
    /// Validates unit direction and `near < far`.
    pub fn new(origin: [f64; 3], direction: [f64; 3], near: f64, far: f64) -> Result<Self, FieldError> {
        let norm = direction.iter().map(|d| d * d).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > 1e-6 {
            return Err(FieldError::InvalidRay(format!("direction norm {norm}")));
        }
        if !(near < far) || !near.is_finite() || !far.is_finite() {
            return Err(FieldError::InvalidRay(format!("near {near} must be below far {far}")));
        }
        Ok(Self {
            origin,
            direction,
            near,
            far,
        })
    }

    pub fn at(&self, t: f64) -> [f64; 3] {
        [0, 1, 2].map(|d| self.origin[d] + t * self.direction[d])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RenderConfig {
    pub samples_per_ray: usize,
    pub background: [f32; 3],
    pub stratified: bool,
    pub seed: u64,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self {
            samples_per_ray: 32,
            background: [1.0; 3],
            stratified: false,
            seed: 0,
        }
    }
}

/// Sample distances, interval lengths and unit-cube positions along a ray.
#[derive(Clone, Debug, PartialEq)]
pub struct Samples {
    pub t: Vec<f64>,
    pub deltas: Vec<f64>,
    pub positions: Vec<[f64; 3]>,
}

/// Bin midpoints (or jittered bin positions) between `near` and `far`.
/// `ray_id` selects the jitter stream so that results do not depend on the
/// order rays are processed in.
pub fn sample_ray(ray: &Ray, cfg: &RenderConfig, ray_id: u64) -> Result<Samples, FieldError> {
    if !(ray.near < ray.far) {
        return Err(FieldError::InvalidRay(format!(
            "near {} must be below far {}",
            ray.near, ray.far
        )));
    }
    if cfg.samples_per_ray == 0 {
        return Err(FieldError::InvalidRay("samples_per_ray must be positive".into()));
    }
    let n = cfg.samples_per_ray;
    let bin = (ray.far - ray.near) / n as f64;
    let mut rng = cfg.stratified.then(|| {
        let mut r = ChaCha8Rng::seed_from_u64(cfg.seed);
        r.set_stream(ray_id);
        r
    });
    let t: Vec<f64> = (0..n)
        .map(|i| {
            let u = rng.as_mut().map_or(0.5, |r| r.random::<f64>());
            ray.near + (i as f64 + u) * bin
        })
        .collect();
    let deltas = (0..n)
        .map(|i| if i + 1 < n { t[i + 1] - t[i] } else { bin })
        .collect();
    let positions = t.iter().map(|&ti| to_unit_cube(ray.at(ti))).collect();
    Ok(Samples {
        t,
        deltas,
        positions,
    })
}

/// Maps scene coordinates in `[-1, 1]³` to the encoder's unit cube. Points
/// that overshoot by rounding only are snapped onto the boundary; anything
/// further out is left for the encoder to reject.
fn to_unit_cube(p: [f64; 3]) -> [f64; 3] {
    p.map(|v| {
        let u = (v + 1.0) * 0.5;
        if (-BOUNDARY_EPS..0.0).contains(&u) {
            0.0
        } else if u > 1.0 && u <= 1.0 + BOUNDARY_EPS {
            1.0
        } else {
            u
        }
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Composite {
    pub rgb: [f64; 3],
    pub opacity: f64,
    pub weights: Vec<f64>,
    /// `T_i` for every sample plus the final transmittance.
    pub transmittance: Vec<f64>,
}

/// Alpha compositing of per-sample densities and colors over a background.
pub fn composite(
    sigmas: &[f64],
    colors: &[[f64; 3]],
    deltas: &[f64],
    background: [f64; 3],
) -> Result<Composite, FieldError> {
    if sigmas.len() != colors.len() || sigmas.len() != deltas.len() {
        return Err(FieldError::Composite(format!(
            "length mismatch: {} densities, {} colors, {} deltas",
            sigmas.len(),
            colors.len(),
            deltas.len()
        )));
    }
    if sigmas.iter().any(|s| !(*s >= 0.0)) {
        return Err(FieldError::Composite("negative density".into()));
    }
    if deltas.iter().any(|d| !(*d >= 0.0)) {
        return Err(FieldError::Composite("negative interval".into()));
    }
    let mut rgb = [0.0; 3];
    let mut trans = 1.0;
    let mut weights = Vec::with_capacity(sigmas.len());
    let mut transmittance = Vec::with_capacity(sigmas.len() + 1);
    for i in 0..sigmas.len() {
        transmittance.push(trans);
        let survive = (-sigmas[i] * deltas[i]).exp();
        let w = trans * (1.0 - survive);
        for ch in 0..3 {
            rgb[ch] += w * colors[i][ch];
        }
        weights.push(w);
        trans *= survive;
    }
    transmittance.push(trans);
    for ch in 0..3 {
        rgb[ch] += trans * background[ch];
    }
    Ok(Composite {
        rgb,
        opacity: weights.iter().sum(),
        weights,
        transmittance,
    })
}

/// Compositing of many rays on a tape. Inputs are `σ [K,1]` and rgb `[K,3]`,
/// with ray `r` owning samples `offsets[r]..offsets[r+1]`.
struct VolumeRenderOp<S: Real> {
    offsets: Vec<usize>,
    deltas: Vec<S>,
    background: [S; 3],
}

impl<S: Real> VolumeRenderOp<S> {
    fn forward(&self, sigma: &[S], rgb: &[S]) -> Vec<S> {
        let rays = self.offsets.len() - 1;
        let mut out = vec![S::zero(); rays * 3];
        for r in 0..rays {
            let mut trans = S::one();
            let px = &mut out[r * 3..r * 3 + 3];
            for i in self.offsets[r]..self.offsets[r + 1] {
                let survive = (-sigma[i] * self.deltas[i]).exp();
                let w = trans * (S::one() - survive);
                for ch in 0..3 {
                    px[ch] += w * rgb[i * 3 + ch];
                }
                trans *= survive;
            }
            for ch in 0..3 {
                px[ch] += trans * self.background[ch];
            }
        }
        out
    }
}

impl<S: Real> CustomOp<S> for VolumeRenderOp<S> {
    fn name(&self) -> &'static str {
        "volume_render"
    }

    fn backward(
        &self,
        inputs: &[&Tensor<S>],
        needs_grad: &[bool],
        _output: &Tensor<S>,
        grad: &Tensor<S>,
    ) -> Vec<Option<Tensor<S>>> {
        let sigma = inputs[0].data();
        let rgb = inputs[1].data();
        let g = grad.data();
        let k = sigma.len();
        let mut d_sigma = vec![S::zero(); k];
        let mut d_rgb = vec![S::zero(); k * 3];
        let mut weights = Vec::new();
        let mut trans_after = Vec::new();
        for r in 0..self.offsets.len() - 1 {
            let (start, end) = (self.offsets[r], self.offsets[r + 1]);
            weights.clear();
            trans_after.clear();
            let mut trans = S::one();
            for i in start..end {
                let survive = (-sigma[i] * self.deltas[i]).exp();
                weights.push(trans * (S::one() - survive));
                trans *= survive;
                trans_after.push(trans);
            }
            let gr = &g[r * 3..r * 3 + 3];
            // Running sum of w_k c_k for k > i plus the background term.
            let mut tail = [0, 1, 2].map(|ch| trans * self.background[ch]);
            for i in (start..end).rev() {
                let j = i - start;
                let w = weights[j];
                let mut ds = S::zero();
                for ch in 0..3 {
                    let c = rgb[i * 3 + ch];
                    d_rgb[i * 3 + ch] = w * gr[ch];
                    ds += gr[ch] * (trans_after[j] * c - tail[ch]);
                    tail[ch] += w * c;
                }
                d_sigma[i] = ds * self.deltas[i];
            }
        }
        vec![
            needs_grad[0].then(|| Tensor::new(vec![k, 1], d_sigma).unwrap()),
            needs_grad[1].then(|| Tensor::new(vec![k, 3], d_rgb).unwrap()),
        ]
    }
}

/// Renders a batch of rays on `tape`, returning `[R, 3]` pixel colors.
/// Each entry carries the ray (`None` for pixels that miss the scene bounds,
/// which see only the background) and its jitter stream id.
pub fn render_batch<S: Real>(
    tape: &mut Tape<S>,
    cfg: &FieldConfig,
    vars: &super::FieldVars,
    rays: &[(Option<Ray>, u64)],
    rcfg: &RenderConfig,
) -> Result<Var, FieldError> {
    let dir_dim = cfg.dir_dim();
    let mut offsets = Vec::with_capacity(rays.len() + 1);
    offsets.push(0);
    let mut positions = Vec::new();
    let mut dirs = Vec::new();
    let mut deltas = Vec::new();
    for (ray, id) in rays {
        if let Some(ray) = ray {
            let s = sample_ray(ray, rcfg, *id)?;
            let enc = direction_encode(ray.direction, cfg.dir_bands)?;
            for (p, d) in s.positions.iter().zip(&s.deltas) {
                positions.extend(p.iter().map(|&v| S::lit(v)));
                dirs.extend(enc.iter().map(|&v| S::lit(v)));
                deltas.push(S::lit(*d));
            }
        }
        offsets.push(deltas.len());
    }
    let k = deltas.len();
    let background = rcfg.background.map(|v| S::lit(v as f64));
    let op = VolumeRenderOp {
        offsets,
        deltas,
        background,
    };
    if k == 0 {
        let out = op.forward(&[], &[]);
        return Ok(tape.constant(Tensor::new(vec![rays.len(), 3], out)?));
    }
    let pos = tape.constant(Tensor::new(vec![k, 3], positions)?);
    let dir = tape.constant(Tensor::new(vec![k, dir_dim], dirs)?);
    let (sigma, rgb) = field_forward(tape, cfg, vars, pos, dir)?;
    let out = op.forward(tape.value(sigma).data(), tape.value(rgb).data());
    let out = Tensor::new(vec![rays.len(), 3], out)?;
    Ok(tape.custom(&[sigma, rgb], out, Box::new(op))?)
}

/// Gradient-free rendering of many rays, parallel over fixed-size chunks.
pub fn render_rays<S: Real>(
    params: &NerfParams<S>,
    cfg: &FieldConfig,
    rays: &[(Option<Ray>, u64)],
    rcfg: &RenderConfig,
) -> Result<Vec<[f32; 3]>, FieldError> {
    params.check(cfg)?;
    let chunks: Vec<Vec<[f32; 3]>> = rays
        .par_chunks(RENDER_CHUNK)
        .map(|chunk| {
            let mut tape = Tape::new();
            let vars = params.constants(&mut tape);
            let out = render_batch(&mut tape, cfg, &vars, chunk, rcfg)?;
            Ok(tape
                .value(out)
                .data()
                .chunks(3)
                .map(|c| [c[0].f64() as f32, c[1].f64() as f32, c[2].f64() as f32])
                .collect())
        })
        .collect::<Result<_, FieldError>>()?;
    Ok(chunks.concat())
}

/// Densities at scene-space points in `[-1, 1]³`, evaluated in parallel chunks.
pub fn densities<S: Real>(
    params: &NerfParams<S>,
    cfg: &FieldConfig,
    points: &[[f64; 3]],
) -> Result<Vec<f64>, FieldError> {
    params.check(cfg)?;
    let enc = direction_encode([0.0, 0.0, 1.0], cfg.dir_bands)?;
    let chunks: Vec<Vec<f64>> = points
        .par_chunks(4 * RENDER_CHUNK)
        .map(|chunk| {
            let mut tape = Tape::new();
            let vars = params.constants(&mut tape);
            let pos = chunk.iter().flat_map(|&p| to_unit_cube(p)).map(S::lit).collect();
            let pos = tape.constant(Tensor::new(vec![chunk.len(), 3], pos)?);
            let dirs = (0..chunk.len()).flat_map(|_| enc.iter().map(|&v| S::lit(v))).collect();
            let dirs = tape.constant(Tensor::new(vec![chunk.len(), enc.len()], dirs)?);
            let (sigma, _) = field_forward(&mut tape, cfg, &vars, pos, dirs)?;
            Ok(tape.value(sigma).data().iter().map(|v| v.f64()).collect())
        })
        .collect::<Result<_, FieldError>>()?;
    Ok(chunks.concat())
}

/// Renders a full image; the jitter stream of each pixel is its row-major index.
pub fn render_image<S: Real>(
    params: &NerfParams<S>,
    cfg: &FieldConfig,
    intrinsics: &CameraIntrinsics,
    pose: &Pose,
    rcfg: &RenderConfig,
) -> Result<Image, FieldError> {
    let (w, h) = (intrinsics.width, intrinsics.height);
    let mut rays = Vec::with_capacity(w * h);
    for v in 0..h {
        for u in 0..w {
            let ray = camera_ray(intrinsics, pose, u, v).map_err(|e| FieldError::Camera(e.to_string()))?;
            rays.push((ray, (v * w + u) as u64));
        }
    }
    let pixels = render_rays(params, cfg, &rays, rcfg)?;
    Ok(Image::from_pixels(w, h, &pixels))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::FieldVars;
    use crate::hash_encoding::HashGridConfig;
    use crate::tensor::finite_diff_check_coords;
    use proptest::prelude::{prop, prop_assert, proptest};

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn midpoint_samples() {
        let ray = Ray::new([0.0; 3], [0.0, 0.0, 1.0], 0.0, 1.0).unwrap();
        let mut cfg = RenderConfig {
            samples_per_ray: 4,
            ..Default::default()
        };
        let s = sample_ray(&ray, &cfg, 0).unwrap();
        assert_eq!(s.t, vec![0.125, 0.375, 0.625, 0.875]);
        assert_eq!(s.deltas, vec![0.25; 4]);
        assert_eq!(s.positions[0], [0.5, 0.5, 0.5625]);
        cfg.samples_per_ray = 1;
        let ray = Ray::new([0.0; 3], [1.0, 0.0, 0.0], 0.2, 0.6).unwrap();
        assert!(close(sample_ray(&ray, &cfg, 0).unwrap().t[0], 0.4, 1e-15));
    }

    #[test]
    fn stratified_samples_are_seeded_and_stay_in_bins() {
        let ray = Ray::new([0.0; 3], [0.0, 1.0, 0.0], -1.0, 1.0).unwrap();
        let cfg = RenderConfig {
            samples_per_ray: 8,
            stratified: true,
            seed: 9,
            ..Default::default()
        };
        let a = sample_ray(&ray, &cfg, 3).unwrap();
        assert_eq!(a, sample_ray(&ray, &cfg, 3).unwrap());
        assert_ne!(a, sample_ray(&ray, &cfg, 4).unwrap());
        for (i, t) in a.t.iter().enumerate() {
            assert!(*t >= -1.0 + 0.25 * i as f64 && *t < -1.0 + 0.25 * (i + 1) as f64);
        }
    }

    #[test]
    fn invalid_rays_rejected() {
        assert!(Ray::new([0.0; 3], [0.0, 0.0, 2.0], 0.0, 1.0).is_err());
        assert!(Ray::new([0.0; 3], [0.0, 0.0, 1.0], 1.0, 1.0).is_err());
        let bad = Ray {
            origin: [0.0; 3],
            direction: [0.0, 0.0, 1.0],
            near: 2.0,
            far: 1.0,
        };
        assert!(sample_ray(&bad, &RenderConfig::default(), 0).is_err());
    }

    #[test]
    fn composite_closed_forms() {
        let c = composite(&[0.0; 3], &[[0.2, 0.3, 0.4]; 3], &[0.1; 3], [1.0, 0.5, 0.0]).unwrap();
        assert_eq!(c.rgb, [1.0, 0.5, 0.0]);
        assert_eq!(c.opacity, 0.0);

        let c = composite(&[1e10, 1.0], &[[0.1, 0.7, 0.3], [1.0; 3]], &[0.1, 0.1], [1.0; 3]).unwrap();
        assert_eq!(c.rgb, [0.1, 0.7, 0.3]);
        assert_eq!(c.opacity, 1.0);

        let red = [1.0, 0.0, 0.0];
        let blue = [0.0, 0.0, 1.0];
        let c = composite(&[1.0, 2.0], &[red, blue], &[0.1, 0.1], [0.0; 3]).unwrap();
        let w1 = 1.0 - (-0.1f64).exp();
        let w2 = (-0.1f64).exp() * (1.0 - (-0.2f64).exp());
        assert!(close(c.weights[0], w1, 1e-15));
        assert!(close(c.weights[1], w2, 1e-15));
        assert!(close(c.rgb[0], w1, 1e-15) && close(c.rgb[2], w2, 1e-15));

        assert!(composite(&[-1.0], &[red], &[0.1], [0.0; 3]).is_err());
        assert!(composite(&[1.0], &[red], &[-0.1], [0.0; 3]).is_err());
        assert!(composite(&[1.0, 1.0], &[red], &[0.1], [0.0; 3]).is_err());
    }

    proptest! {
        #[test]
        fn compositing_is_a_convex_combination(
            samples in prop::collection::vec((0.0f64..50.0, 0.0f64..1.0, 0.0f64..0.5), 1..24),
            bg in 0.0f64..1.0,
        ) {
            let sigmas: Vec<f64> = samples.iter().map(|s| s.0).collect();
            let colors: Vec<[f64; 3]> = samples.iter().map(|s| [s.1, 1.0 - s.1, 0.5]).collect();
            let deltas: Vec<f64> = samples.iter().map(|s| s.2).collect();
            let c = composite(&sigmas, &colors, &deltas, [bg; 3]).unwrap();
            prop_assert!(c.transmittance.windows(2).all(|w| w[1] <= w[0]));
            prop_assert!((0.0..=1.0 + 1e-12).contains(&c.opacity));
            let last = *c.transmittance.last().unwrap();
            prop_assert!((c.opacity + last - 1.0).abs() < 1e-12);
            for ch in 0..3 {
                let lo = colors.iter().map(|x| x[ch]).fold(bg, f64::min);
                let hi = colors.iter().map(|x| x[ch]).fold(bg, f64::max);
                prop_assert!(c.rgb[ch] >= lo - 1e-12 && c.rgb[ch] <= hi + 1e-12);
            }
        }
    }

    fn grid() -> HashGridConfig {
        HashGridConfig {
            levels: 3,
            table_size: 128,
            features: 2,
            n_min: 3,
            n_max: 12,
        }
    }

    fn random_params(cfg: &FieldConfig, seed: u64) -> NerfParams<f64> {
        let mut p = NerfParams::<f64>::init(cfg, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
        if let Some(t) = p.tables.as_mut() {
            for v in t.data_mut() {
                *v = rng.random_range(-1.0..1.0);
            }
        }
        p
    }

    fn test_rays() -> Vec<(Option<Ray>, u64)> {
        let mut out = Vec::new();
        for i in 0..5 {
            let a = i as f64 * 0.7;
            let d = [a.cos() * 0.6, a.sin() * 0.6, -0.8];
            let (near, far) = crate::scene::clip_to_bounds([0.1, -0.1, 2.0], d).unwrap();
            out.push((Some(Ray::new([0.1, -0.1, 2.0], d, near, far).unwrap()), i));
        }
        out.push((None, 5));
        out
    }

    #[test]
    fn volume_render_op_gradients() {
        let cfg = FieldConfig::hash(grid());
        let p = random_params(&cfg, 1);
        let rcfg = RenderConfig {
            samples_per_ray: 6,
            stratified: true,
            seed: 2,
            background: [1.0, 0.5, 0.25],
        };
        let rays = test_rays();
        let weights = Tensor::from_fn(&[rays.len(), 3], |i| 0.3 + 0.1 * i as f64);
        let loss = |tape: &mut Tape<f64>, vars: &FieldVars| {
            let img = render_batch(tape, &cfg, vars, &rays, &rcfg).map_err(|e| crate::tensor::TensorError::Invalid(e.to_string()))?;
            tape.mse(img, &weights)
        };
        let tables = p.tables.clone().unwrap();
        let coords: Vec<usize> = (0..tables.len()).step_by(5).collect();
        let err = finite_diff_check_coords(
            |tape, t| {
                let mut vars = p.constants(tape);
                vars.tables = Some(t);
                loss(tape, &vars)
            },
            &tables,
            1e-3,
            &coords,
        )
        .unwrap();
        assert!(err < 1e-4, "tables: {err}");
        for layer in [1usize, 2, 4] {
            let w = p.layers[layer].weight.clone();
            let coords: Vec<usize> = (0..w.len()).step_by(11).collect();
            let err = finite_diff_check_coords(
                |tape, wv| {
                    let mut vars = p.constants(tape);
                    vars.layers[layer].0 = wv;
                    loss(tape, &vars)
                },
                &w,
                1e-3,
                &coords,
            )
            .unwrap();
            assert!(err < 1e-4, "layer {layer}: {err}");
        }
    }

    #[test]
    fn batch_matches_per_ray_composite() {
        let cfg = FieldConfig::hash(grid());
        let p = random_params(&cfg, 4);
        let rcfg = RenderConfig {
            samples_per_ray: 7,
            stratified: true,
            seed: 5,
            ..Default::default()
        };
        let rays = test_rays();
        let batch = render_rays(&p, &cfg, &rays, &rcfg).unwrap();
        for (k, (ray, id)) in rays.iter().enumerate() {
            let expected = match ray {
                None => [1.0; 3],
                Some(ray) => {
                    let s = sample_ray(ray, &rcfg, *id).unwrap();
                    let mut sig = Vec::new();
                    let mut col = Vec::new();
                    for x in &s.positions {
                        let o = super::super::field_eval(&p, &cfg, *x, ray.direction).unwrap();
                        sig.push(o.sigma);
                        col.push(o.rgb);
                    }
                    composite(&sig, &col, &s.deltas, [1.0; 3]).unwrap().rgb
                }
            };
            for ch in 0..3 {
                assert!(close(batch[k][ch] as f64, expected[ch], 1e-6));
            }
        }
    }
}
