//! Finite-difference checks of every differentiable stage in double precision.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::field::{render_batch, FieldConfig, FieldVars, NerfParams, Ray, RenderConfig};
use crate::hash_encoding::{self, HashGridConfig};
use crate::hypernet::{HypernetConfig, HypernetParams, HypernetVars};
use crate::scene::{camera_ray, CameraIntrinsics, Pose};
use crate::tensor::{finite_diff_check_multi, Activation, Tape, Tensor, TensorError, Var};
use crate::training::{photometric_loss, prior_loss_on_tape, LossNorm, TrainError};

/// Step used by every check.
pub const FD_STEP: f64 = 1e-3;

/// Worst relative error per stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradientReport {
    pub hash_tables: f64,
    pub field_mlp: f64,
    pub hypernet_weights: f64,
    pub shape_code: f64,
    pub color_code: f64,
    pub checked_coordinates: usize,
}

impl GradientReport {
    pub fn max(&self) -> f64 {
        [
            self.hash_tables,
            self.field_mlp,
            self.hypernet_weights,
            self.shape_code,
            self.color_code,
        ]
        .into_iter()
        .fold(0.0, f64::max)
    }
}

fn small_grid() -> HashGridConfig {
    // Coarse levels index densely, fine levels hash.
    HashGridConfig {
        levels: 4,
        table_size: 256,
        features: 2,
        n_min: 2,
        n_max: 16,
    }
}

fn small_field() -> FieldConfig {
    FieldConfig {
        width: 16,
        ..FieldConfig::hash(small_grid())
    }
}

fn probe_rays() -> Vec<(Option<Ray>, u64)> {
    let intr = CameraIntrinsics::from_fov(4, 4, 50.0);
    let pose = Pose::orbit(30.0, 25.0, 2.5).expect("fixed pose is valid");
    let mut rays = Vec::new();
    for v in 0..4 {
        for u in 0..4 {
            let ray = camera_ray(&intr, &pose, u, v).expect("pixel in bounds");
            rays.push((ray, (v * 4 + u) as u64));
        }
    }
    rays
}

fn render_cfg() -> RenderConfig {
    RenderConfig {
        samples_per_ray: 8,
        stratified: true,
        seed: 3,
        ..RenderConfig::default()
    }
}

fn all_coords(points: &[Tensor<f64>]) -> Vec<(usize, usize)> {
    points
        .iter()
        .enumerate()
        .flat_map(|(t, p)| (0..p.len()).map(move |i| (t, i)))
        .collect()
}

fn field_vars(cfg: &FieldConfig, xs: &[Var]) -> FieldVars {
    let (tables, rest) = if cfg.grid().is_some() {
        (Some(xs[0]), &xs[1..])
    } else {
        (None, xs)
    };
    FieldVars {
        tables,
        layers: rest.chunks(2).map(|c| (c[0], c[1])).collect(),
    }
}

fn err(e: impl std::fmt::Display) -> TensorError {
    TensorError::Invalid(e.to_string())
}

/// Hash encoding with respect to its tables, through a softplus readout.
pub fn check_hash_tables(seed: u64) -> Result<(f64, usize), TensorError> {
    let grid = small_grid();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let positions = Tensor::from_fn(&[24, 3], |_| rng.random_range(0.0..1.0));
    let tables = Tensor::from_fn(&[grid.table_rows(), grid.features], |_| rng.random_range(-0.5..0.5));
    let readout = Tensor::from_fn(&[grid.levels * grid.features, 2], |_| rng.random_range(-1.0..1.0));
    let points = [tables];
    let coords = all_coords(&points);
    let worst = finite_diff_check_multi(
        |tape, xs| {
            let p = tape.constant(positions.clone());
            let enc = hash_encoding::encode(tape, p, xs[0], &grid).map_err(err)?;
            let w = tape.constant(readout.clone());
            let b = tape.constant(Tensor::full(&[2], 0.1));
            let y = tape.affine(enc, w, b)?;
            let y = tape.activation(y, Activation::Softplus)?;
            tape.sum(y)
        },
        &points,
        FD_STEP,
        &coords,
    )?;
    Ok((worst, coords.len()))
}

/// Rendering loss with respect to every field MLP weight (tables held fixed).
pub fn check_field_mlp(seed: u64) -> Result<(f64, usize), TensorError> {
    let cfg = small_field();
    let params = NerfParams::<f64>::init(&cfg, seed);
    let tables = params.tables.clone().expect("hash field");
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
    let tables = Tensor::from_fn(tables.shape(), |_| rng.random_range(-0.5..0.5));
    let targets: Vec<[f32; 3]> = (0..16).map(|_| [rng.random(), rng.random(), rng.random()]).collect();
    let rays = probe_rays();
    let points: Vec<Tensor<f64>> = params.tensors().into_iter().skip(1).cloned().collect();
    let coords = all_coords(&points);
    let worst = finite_diff_check_multi(
        |tape, xs| {
            let t = tape.constant(tables.clone());
            let mut all = vec![t];
            all.extend_from_slice(xs);
            let vars = field_vars(&cfg, &all);
            let pred = render_batch(tape, &cfg, &vars, &rays, &render_cfg()).map_err(err)?;
            photometric_loss(tape, pred, &targets, LossNorm::Squared)
        },
        &points,
        FD_STEP,
        &coords,
    )?;
    Ok((worst, coords.len()))
}

/// The full codes → hypernetwork → field → render → loss chain, with
/// respect to hypernetwork weights and both codes. `omega_samples` weight
/// coordinates are drawn at random; every code coordinate is checked.
pub fn check_prior_chain(seed: u64, omega_samples: usize) -> Result<(f64, f64, f64, usize), TensorError> {
    let cfg = HypernetConfig {
        shape_dim: 4,
        color_dim: 4,
        hidden: 8,
        field: small_field(),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut hyper = HypernetParams::<f64>::init(&cfg, seed).map_err(err)?;
    // Larger output weights than the default init so every head matters.
    for head in &mut hyper.heads {
        let last = head.layers.last_mut().expect("heads have layers");
        last.weight = Tensor::from_fn(last.weight.shape(), |_| rng.random_range(-0.3..0.3));
    }
    let shape = Tensor::from_fn(&[1, 4], |_| rng.random_range(-1.0..1.0));
    let color = Tensor::from_fn(&[1, 4], |_| rng.random_range(-1.0..1.0));
    let targets: Vec<[f32; 3]> = (0..16).map(|_| [rng.random(), rng.random(), rng.random()]).collect();
    let rays = probe_rays();
    let mut points: Vec<Tensor<f64>> = hyper.tensors().into_iter().cloned().collect();
    let n_omega = points.len();
    points.push(shape);
    points.push(color);
    let template = hyper.clone();
    let f = |tape: &mut Tape<f64>, xs: &[Var]| -> Result<Var, TensorError> {
        let vars = HypernetVars {
            heads: {
                let mut it = xs[..n_omega].chunks(2);
                template
                    .heads
                    .iter()
                    .map(|h| h.layers.iter().map(|_| {
                        let c = it.next().expect("one pair per layer");
                        (c[0], c[1])
                    }).collect())
                    .collect()
            },
        };
        prior_loss_on_tape(
            tape,
            &template,
            &vars,
            xs[n_omega],
            xs[n_omega + 1],
            &rays,
            &targets,
            &render_cfg(),
            LossNorm::Squared,
        )
        .map_err(|e: TrainError| err(e))
    };
    let omega_coords: Vec<(usize, usize)> = (0..omega_samples)
        .map(|_| {
            let t = rng.random_range(0..n_omega);
            (t, rng.random_range(0..points[t].len()))
        })
        .collect();
    let code = |t: usize| (0..4).map(|i| (t, i)).collect::<Vec<_>>();
    let omega = finite_diff_check_multi(f, &points, FD_STEP, &omega_coords)?;
    let s = finite_diff_check_multi(f, &points, FD_STEP, &code(n_omega))?;
    let c = finite_diff_check_multi(f, &points, FD_STEP, &code(n_omega + 1))?;
    Ok((omega, s, c, omega_samples + 8))
}

/// Runs every check.
pub fn gradient_suite(seed: u64) -> Result<GradientReport, TensorError> {
    let (hash_tables, n1) = check_hash_tables(seed)?;
    let (field_mlp, n2) = check_field_mlp(seed)?;
    let (hypernet_weights, shape_code, color_code, n3) = check_prior_chain(seed, 400)?;
    Ok(GradientReport {
        hash_tables,
        field_mlp,
        hypernet_weights,
        shape_code,
        color_code,
        checked_coordinates: n1 + n2 + n3,
    })
}
