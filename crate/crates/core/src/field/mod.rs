//! The instance field `x, θ → (σ, rgb)`: hash-grid (or frequency) position
//! encoding, a small trunk emitting a density logit and geometry features,
//! and a color head conditioned on the encoded view direction.

mod render;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hash_encoding::{self, HashGridConfig, HashGridError};
use crate::tensor::{Activation, Real, Tape, Tensor, TensorError, Var};

pub use render::{
    composite, densities, render_batch, render_image, render_rays, sample_ray, Composite, Ray, RenderConfig,
    Samples,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FieldError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    HashGrid(#[from] HashGridError),
    #[error("direction must be non-zero")]
    ZeroDirection,
    #[error("invalid ray: {0}")]
    InvalidRay(String),
    #[error("volume render: {0}")]
    Composite(String),
    #[error("parameters do not match field config: {0}")]
    Params(String),
    #[error("camera: {0}")]
    Camera(String),
}

/// How positions are encoded before the trunk.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PositionEncoding {
    Hash(HashGridConfig),
    /// Frequency encoding with `bands` octaves (ablation without hash tables).
    Frequency { bands: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FieldConfig {
    pub encoding: PositionEncoding,
    /// Number of trunk layers (the last emits density logit + geometry features).
    pub trunk_layers: usize,
    pub width: usize,
    pub geo_features: usize,
    pub dir_bands: usize,
}

impl Default for FieldConfig {
    fn default() -> Self {
        Self::hash(HashGridConfig::default())
    }
}

impl FieldConfig {
    /// Five 64-wide layers: three trunk, two color.
    pub fn hash(grid: HashGridConfig) -> Self {
        Self {
            encoding: PositionEncoding::Hash(grid),
            trunk_layers: 3,
            width: 64,
            geo_features: 15,
            dir_bands: 4,
        }
    }

    /// Frequency-encoded fallback with a deeper 8-layer trunk.
    pub fn frequency(bands: usize) -> Self {
        Self {
            encoding: PositionEncoding::Frequency { bands },
            trunk_layers: 8,
            width: 64,
            geo_features: 15,
            dir_bands: 4,
        }
    }

    pub fn grid(&self) -> Option<&HashGridConfig> {
        match &self.encoding {
            PositionEncoding::Hash(g) => Some(g),
            PositionEncoding::Frequency { .. } => None,
        }
    }

    pub fn input_dim(&self) -> usize {
        match &self.encoding {
            PositionEncoding::Hash(g) => g.output_dim(),
            PositionEncoding::Frequency { bands } => 3 + 6 * bands,
        }
    }

    pub fn dir_dim(&self) -> usize {
        3 + 6 * self.dir_bands
    }

    /// `(fan_in, fan_out)` of every layer, trunk first then color head.
    pub fn layer_shapes(&self) -> Vec<(usize, usize)> {
        let mut shapes = Vec::new();
        let mut fan_in = self.input_dim();
        for _ in 0..self.trunk_layers - 1 {
            shapes.push((fan_in, self.width));
            fan_in = self.width;
        }
        shapes.push((fan_in, 1 + self.geo_features));
        shapes.push((self.geo_features + self.dir_dim(), self.width));
        shapes.push((self.width, 3));
        shapes
    }

    /// Layers whose parameters may depend only on the shape code.
    pub fn is_density_layer(&self, layer: usize) -> bool {
        layer < self.trunk_layers
    }

    pub fn table_shape(&self) -> Option<[usize; 2]> {
        self.grid().map(|g| [g.table_rows(), g.features])
    }

    pub fn parameter_count(&self) -> usize {
        let mlp: usize = self.layer_shapes().iter().map(|(i, o)| i * o + o).sum();
        mlp + self.grid().map_or(0, HashGridConfig::parameter_count)
    }

    pub fn validate(&self) -> Result<(), FieldError> {
        if self.trunk_layers < 1 || self.width == 0 {
            return Err(FieldError::Params("empty trunk".into()));
        }
        if let Some(g) = self.grid() {
            g.validate()?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layer<S: Real> {
    /// `[fan_in, fan_out]`
    pub weight: Tensor<S>,
    /// `[fan_out]`
    pub bias: Tensor<S>,
}

/// One instance's field parameters: MLP layers plus (for hash encoding) the
/// `[L·T, F]` tables.
#[derive(Clone, Debug, PartialEq)]
pub struct NerfParams<S: Real> {
    pub tables: Option<Tensor<S>>,
    pub layers: Vec<Layer<S>>,
}

impl<S: Real> NerfParams<S> {
    pub fn zeros(cfg: &FieldConfig) -> Self {
        Self {
            tables: cfg.table_shape().map(|s| Tensor::zeros(&s)),
            layers: cfg
                .layer_shapes()
                .into_iter()
                .map(|(i, o)| Layer {
                    weight: Tensor::zeros(&[i, o]),
                    bias: Tensor::zeros(&[o]),
                })
                .collect(),
        }
    }

    /// Standard single-field initialization: layers `U(±1/√fan_in)` and
    /// tables `U(±1e-4)`.
    pub fn init(cfg: &FieldConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tables = cfg
            .table_shape()
            .map(|s| Tensor::from_fn(&s, |_| S::lit(rng.random_range(-1e-4..1e-4))));
        let layers = cfg
            .layer_shapes()
            .into_iter()
            .map(|(i, o)| {
                let bound = 1.0 / (i as f64).sqrt();
                Layer {
                    weight: Tensor::from_fn(&[i, o], |_| S::lit(rng.random_range(-bound..bound))),
                    bias: Tensor::from_fn(&[o], |_| S::lit(rng.random_range(-bound..bound))),
                }
            })
            .collect();
        Self { tables, layers }
    }

    pub fn check(&self, cfg: &FieldConfig) -> Result<(), FieldError> {
        let shapes = cfg.layer_shapes();
        if shapes.len() != self.layers.len() {
            return Err(FieldError::Params(format!(
                "expected {} layers, got {}",
                shapes.len(),
                self.layers.len()
            )));
        }
        for (l, ((i, o), layer)) in shapes.iter().zip(&self.layers).enumerate() {
            if layer.weight.shape() != [*i, *o] || layer.bias.shape() != [*o] {
                return Err(FieldError::Params(format!("layer {l} shape")));
            }
        }
        match (cfg.table_shape(), &self.tables) {
            (Some(s), Some(t)) if t.shape() == s => Ok(()),
            (None, None) => Ok(()),
            _ => Err(FieldError::Params("hash table shape".into())),
        }
    }

    /// Places every tensor on the tape as trainable leaves.
    pub fn leaves(&self, tape: &mut Tape<S>) -> FieldVars {
        self.place(tape, true)
    }

    /// Places every tensor on the tape as constants.
    pub fn constants(&self, tape: &mut Tape<S>) -> FieldVars {
        self.place(tape, false)
    }

    fn place(&self, tape: &mut Tape<S>, trainable: bool) -> FieldVars {
        let mut put = |t: &Tensor<S>| {
            if trainable {
                tape.leaf(t.clone())
            } else {
                tape.constant(t.clone())
            }
        };
        FieldVars {
            tables: self.tables.as_ref().map(&mut put),
            layers: self
                .layers
                .iter()
                .map(|l| (put(&l.weight), put(&l.bias)))
                .collect(),
        }
    }

    /// All tensors in a fixed order: tables (if any) then `(W, b)` per layer.
    pub fn tensors(&self) -> Vec<&Tensor<S>> {
        let mut out: Vec<&Tensor<S>> = self.tables.iter().collect();
        for l in &self.layers {
            out.push(&l.weight);
            out.push(&l.bias);
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<S>> {
        let mut out: Vec<&mut Tensor<S>> = self.tables.iter_mut().collect();
        for l in &mut self.layers {
            out.push(&mut l.weight);
            out.push(&mut l.bias);
        }
        out
    }

    pub fn cast<T: Real>(&self) -> NerfParams<T> {
        NerfParams {
            tables: self.tables.as_ref().map(Tensor::cast),
            layers: self
                .layers
                .iter()
                .map(|l| Layer {
                    weight: l.weight.cast(),
                    bias: l.bias.cast(),
                })
                .collect(),
        }
    }
}

/// Tape handles for a [`NerfParams`], in the same order as `tensors()`.
#[derive(Clone, Debug)]
pub struct FieldVars {
    pub tables: Option<Var>,
    pub layers: Vec<(Var, Var)>,
}

impl FieldVars {
    pub fn vars(&self) -> Vec<Var> {
        let mut out: Vec<Var> = self.tables.iter().copied().collect();
        for &(w, b) in &self.layers {
            out.push(w);
            out.push(b);
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FieldOutput {
    pub sigma: f64,
    pub rgb: [f64; 3],
}

/// `[θ, sin(2^k π θ_d), cos(2^k π θ_d)]`, `3 + 6·bands` values.
pub fn direction_encode(dir: [f64; 3], bands: usize) -> Result<Vec<f64>, FieldError> {
    let norm = (dir[0] * dir[0] + dir[1] * dir[1] + dir[2] * dir[2]).sqrt();
    if norm == 0.0 || !norm.is_finite() {
        return Err(FieldError::ZeroDirection);
    }
    Ok(frequency_encode(dir, bands))
}

/// Frequency encoding shared by directions and the fallback position path.
pub fn frequency_encode(v: [f64; 3], bands: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(3 + 6 * bands);
    out.extend_from_slice(&v);
    for k in 0..bands {
        let f = (1u64 << k) as f64 * std::f64::consts::PI;
        out.extend(v.iter().map(|x| (f * x).sin()));
        out.extend(v.iter().map(|x| (f * x).cos()));
    }
    out
}

/// Evaluates the field for `[K, 3]` unit-cube positions and `[K, 3+6B]`
/// encoded directions. Returns `σ` as `[K, 1]` and rgb as `[K, 3]`.
pub fn field_forward<S: Real>(
    tape: &mut Tape<S>,
    cfg: &FieldConfig,
    vars: &FieldVars,
    positions: Var,
    dirs: Var,
) -> Result<(Var, Var), FieldError> {
    let features = match &cfg.encoding {
        PositionEncoding::Hash(grid) => {
            let tables = vars
                .tables
                .ok_or_else(|| FieldError::Params("missing hash tables".into()))?;
            hash_encoding::encode(tape, positions, tables, grid)?
        }
        PositionEncoding::Frequency { bands } => {
            let pv = tape.value(positions);
            let rows = pv.rows();
            let mut data = Vec::with_capacity(rows * cfg.input_dim());
            for r in 0..rows {
                let p = pv.row(r);
                let enc = frequency_encode([p[0].f64(), p[1].f64(), p[2].f64()], *bands);
                data.extend(enc.into_iter().map(S::lit));
            }
            tape.constant(Tensor::new(vec![rows, cfg.input_dim()], data)?)
        }
    };
    let trunk = cfg.trunk_layers;
    let mut h = features;
    for (l, &(w, b)) in vars.layers[..trunk].iter().enumerate() {
        h = tape.affine(h, w, b)?;
        if l + 1 < trunk {
            h = tape.relu(h)?;
        }
    }
    let logit = tape.slice_cols(h, 0, 1)?;
    let sigma = tape.activation(logit, Activation::Softplus)?;
    let geo = tape.slice_cols(h, 1, 1 + cfg.geo_features)?;
    let (c1w, c1b) = vars.layers[trunk];
    let (c2w, c2b) = vars.layers[trunk + 1];
    let c_in = tape.concat_cols(&[geo, dirs])?;
    let c = tape.affine(c_in, c1w, c1b)?;
    let c = tape.relu(c)?;
    let c = tape.affine(c, c2w, c2b)?;
    let rgb = tape.activation(c, Activation::Sigmoid)?;
    Ok((sigma, rgb))
}

/// Single-point evaluation without recording gradients.
pub fn field_eval<S: Real>(
    params: &NerfParams<S>,
    cfg: &FieldConfig,
    x: [f64; 3],
    dir: [f64; 3],
) -> Result<FieldOutput, FieldError> {
    let mut tape = Tape::new();
    let vars = params.constants(&mut tape);
    let pos = tape.constant(Tensor::new(vec![1, 3], x.iter().map(|&v| S::lit(v)).collect())?);
    let enc = direction_encode(dir, cfg.dir_bands)?;
    let dirs = tape.constant(Tensor::new(
        vec![1, enc.len()],
        enc.into_iter().map(S::lit).collect(),
    )?);
    let (sigma, rgb) = field_forward(&mut tape, cfg, &vars, pos, dirs)?;
    let c = tape.value(rgb).data();
    Ok(FieldOutput {
        sigma: tape.value(sigma).item().f64(),
        rgb: [c[0].f64(), c[1].f64(), c[2].f64()],
    })
}

/// Frequency-encoded variant of [`field_eval`]; `params` must match a
/// [`FieldConfig::frequency`] layout.
pub fn field_eval_posenc<S: Real>(
    params: &NerfParams<S>,
    cfg: &FieldConfig,
    x: [f64; 3],
    dir: [f64; 3],
) -> Result<FieldOutput, FieldError> {
    if cfg.grid().is_some() {
        return Err(FieldError::Params("expected a frequency-encoded config".into()));
    }
    field_eval(params, cfg, x, dir)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::finite_diff_check_coords;


    fn desk_grid() -> HashGridConfig {
        HashGridConfig {
            levels: 4,
            table_size: 256,
            features: 2,
            n_min: 4,
            n_max: 32,
        }
    }

    #[test]
    fn layout_has_five_64_wide_layers() {
        let cfg = FieldConfig::default();
        let shapes = cfg.layer_shapes();
        assert_eq!(shapes.len(), 5);
        assert_eq!(shapes[0], (32, 64));
        assert_eq!(shapes[2], (64, 16));
        assert_eq!(shapes[3], (15 + 27, 64));
        assert_eq!(shapes[4], (64, 3));
        assert_eq!(FieldConfig::frequency(10).input_dim(), 63);
        assert_eq!(FieldConfig::frequency(10).layer_shapes().len(), 10);
    }

    #[test]
    fn direction_encoding_lengths_and_values() {
        let d = [0.0, 0.6, 0.8];
        assert_eq!(direction_encode(d, 0).unwrap(), d.to_vec());
        assert_eq!(direction_encode(d, 4).unwrap().len(), 27);
        let e = direction_encode([1.0, 0.0, 0.0], 1).unwrap();
        let pi = std::f64::consts::PI;
        let expected = [1.0, 0.0, 0.0, pi.sin(), 0.0, 0.0, pi.cos(), 1.0, 1.0];
        for (a, b) in e.iter().zip(expected) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(
            direction_encode([0.0; 3], 2),
            Err(FieldError::ZeroDirection)
        );
    }

    #[test]
    fn zero_params_give_trivial_outputs() {
        for cfg in [FieldConfig::hash(desk_grid()), FieldConfig::frequency(10)] {
            let p = NerfParams::<f64>::zeros(&cfg);
            let out = field_eval(&p, &cfg, [0.3, 0.4, 0.5], [0.0, 0.0, 1.0]).unwrap();
            assert!((out.sigma - 2f64.ln()).abs() < 1e-12);
            assert_eq!(out.rgb, [0.5; 3]);
        }
    }

    #[test]
    fn posenc_eval_rejects_hash_config() {
        let cfg = FieldConfig::hash(desk_grid());
        let p = NerfParams::<f64>::zeros(&cfg);
        assert!(field_eval_posenc(&p, &cfg, [0.5; 3], [1.0, 0.0, 0.0]).is_err());
        let cfg = FieldConfig::frequency(10);
        let p = NerfParams::<f64>::zeros(&cfg);
        assert!(field_eval_posenc(&p, &cfg, [0.5; 3], [1.0, 0.0, 0.0]).is_ok());
    }

    #[test]
    fn output_ranges_for_random_params() {
        let cfg = FieldConfig::hash(desk_grid());
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for seed in 0..5 {
            let mut p = NerfParams::<f32>::init(&cfg, seed);
            for t in p.tensors_mut() {
                for v in t.data_mut() {
                    *v *= 8.0;
                }
            }
            for _ in 0..20 {
                let x = [rng.random(), rng.random(), rng.random()];
                let out = field_eval(&p, &cfg, x, [0.0, 1.0, 0.0]).unwrap();
                assert!(out.sigma >= 0.0);
                assert!(out.rgb.iter().all(|c| (0.0..=1.0).contains(c)));
            }
        }
    }

    /// Independent forward: explicit loops for interpolation and layers.
    fn reference_eval(p: &NerfParams<f64>, cfg: &FieldConfig, x: [f64; 3], dir: [f64; 3]) -> FieldOutput {
        let grid = cfg.grid().unwrap();
        let tables = p.tables.as_ref().unwrap();
        let mut feat = Vec::new();
        for (l, res) in grid.level_resolutions().unwrap().into_iter().enumerate() {
            let w = hash_encoding::trilinear_weights(x, res);
            let cell: Vec<u32> = x
                .iter()
                .map(|&v| ((v * res as f64).floor() as u32).min(res - 1))
                .collect();
            let mut acc = vec![0.0; grid.features];
            for (corner, wc) in w.iter().enumerate() {
                let coord = [0, 1, 2].map(|d| cell[d] + ((corner >> d) & 1) as u32);
                let row = l * grid.table_size + hash_encoding::hash_index(coord, res, grid).unwrap();
                for f in 0..grid.features {
                    acc[f] += wc * tables.row(row)[f];
                }
            }
            feat.extend(acc);
        }
        let dense = |input: &[f64], layer: &Layer<f64>| -> Vec<f64> {
            let (i, o) = (layer.weight.shape()[0], layer.weight.shape()[1]);
            (0..o)
                .map(|c| layer.bias.data()[c] + (0..i).map(|r| input[r] * layer.weight.data()[r * o + c]).sum::<f64>())
                .collect()
        };
        let relu = |v: Vec<f64>| v.into_iter().map(|a| a.max(0.0)).collect::<Vec<_>>();
        let h = relu(dense(&feat, &p.layers[0]));
        let h = relu(dense(&h, &p.layers[1]));
        let h = dense(&h, &p.layers[2]);
        let sigma = (1.0 + h[0].exp()).ln();
        let mut cin = h[1..].to_vec();
        cin.extend(direction_encode(dir, cfg.dir_bands).unwrap());
        let c = relu(dense(&cin, &p.layers[3]));
        let c = dense(&c, &p.layers[4]);
        FieldOutput {
            sigma,
            rgb: [0, 1, 2].map(|i| 1.0 / (1.0 + (-c[i]).exp())),
        }
    }

    #[test]
    fn matches_standalone_reimplementation() {
        let cfg = FieldConfig::hash(desk_grid());
        let mut p = NerfParams::<f64>::init(&cfg, 11);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        if let Some(t) = p.tables.as_mut() {
            for v in t.data_mut() {
                *v = rng.random_range(-1.0..1.0);
            }
        }
        for _ in 0..10 {
            let x = [rng.random(), rng.random(), rng.random()];
            let d: [f64; 3] = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), 0.5];
            let n = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
            let d = d.map(|v| v / n);
            let a = field_eval(&p, &cfg, x, d).unwrap();
            let b = reference_eval(&p, &cfg, x, d);
            assert!((a.sigma - b.sigma).abs() < 1e-10);
            for i in 0..3 {
                assert!((a.rgb[i] - b.rgb[i]).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn mlp_gradient_matches_finite_differences() {
        let cfg = FieldConfig::hash(desk_grid());
        let mut p = NerfParams::<f64>::init(&cfg, 21);
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        if let Some(t) = p.tables.as_mut() {
            for v in t.data_mut() {
                *v = rng.random_range(-1.0..1.0);
            }
        }
        let pts: Vec<f64> = (0..24).map(|_| rng.random()).collect();
        let pos = Tensor::new(vec![8, 3], pts).unwrap();
        let dirs: Vec<f64> = (0..8).flat_map(|_| direction_encode([0.36, 0.48, 0.8], 4).unwrap()).collect();
        let dirs = Tensor::new(vec![8, 27], dirs).unwrap();
        for layer in [0usize, 2, 3, 4] {
            let point = p.layers[layer].weight.clone();
            let coords: Vec<usize> = (0..point.len()).step_by(7).collect();
            let err = finite_diff_check_coords(
                |tape, w| {
                    let mut vars = p.constants(tape);
                    vars.layers[layer].0 = w;
                    let x = tape.constant(pos.clone());
                    let d = tape.constant(dirs.clone());
                    let (s, c) = field_forward(tape, &cfg, &vars, x, d)
                        .map_err(|e| TensorError::Invalid(e.to_string()))?;
                    let s = tape.sum(s)?;
                    let c = tape.sum(c)?;
                    let t = tape.concat_cols(&[s, c])?;
                    tape.sum(t)
                },
                &point,
                1e-3,
                &coords,
            )
            .unwrap();
            assert!(err < 1e-4, "layer {layer}: {err}");
        }
    }
}
