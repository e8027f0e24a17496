//! Hypernetwork mapping instance codes to complete field parameters.
//!
//! One 3-layer MLP ("head") per predicted tensor group: the hash tables and
//! each density-trunk layer read the shape code, the color layers read the
//! color code. Geometry therefore cannot depend on the color code.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::field::{FieldConfig, FieldError, FieldVars, Layer, NerfParams};
use crate::tensor::{Real, Tape, Tensor, TensorError, Var};

/// Scale applied to the Kaiming init of every head's output layer.
pub const OUTPUT_INIT_SCALE: f64 = 1e-2;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum HypernetError {
    #[error("code dimension mismatch: expected {expected}, got {got}")]
    CodeDim { expected: usize, got: usize },
    #[error("duplicate instance id '{0}'")]
    DuplicateId(String),
    #[error("unknown instance id '{0}'")]
    UnknownId(String),
    #[error("codebook is empty")]
    EmptyCodebook,
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Field(#[from] FieldError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HypernetConfig {
    pub shape_dim: usize,
    pub color_dim: usize,
    pub hidden: usize,
    pub field: FieldConfig,
}

impl Default for HypernetConfig {
    fn default() -> Self {
        Self {
            shape_dim: 64,
            color_dim: 64,
            hidden: 512,
            field: FieldConfig::default(),
        }
    }
}

/// Which code a head reads.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum CodeKind {
    Shape,
    Color,
}

/// What a head predicts.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum HeadTarget {
    Tables,
    /// Field layer `l`: flattened `[fan_in, fan_out]` weight followed by the bias.
    Layer(usize),
}

impl HypernetConfig {
    /// `(input code, target, output size)` for every head.
    pub fn heads(&self) -> Vec<(CodeKind, HeadTarget, usize)> {
        let f = &self.field;
        let mut out = Vec::new();
        if let Some(g) = f.grid() {
            out.push((CodeKind::Shape, HeadTarget::Tables, g.parameter_count()));
        }
        for (l, (i, o)) in f.layer_shapes().into_iter().enumerate() {
            let code = if f.is_density_layer(l) {
                CodeKind::Shape
            } else {
                CodeKind::Color
            };
            out.push((code, HeadTarget::Layer(l), i * o + o));
        }
        out
    }

    pub fn code_dim(&self, kind: CodeKind) -> usize {
        match kind {
            CodeKind::Shape => self.shape_dim,
            CodeKind::Color => self.color_dim,
        }
    }

    pub fn parameter_count(&self) -> usize {
        self.heads()
            .iter()
            .map(|&(code, _, out)| {
                let d = self.code_dim(code);
                let h = self.hidden;
                (d * h + h) + (h * h + h) + (h * out + out)
            })
            .sum()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HyperHead<S: Real> {
    pub code: CodeKind,
    pub target: HeadTarget,
    pub layers: Vec<Layer<S>>,
}

/// All hypernetwork weights.
#[derive(Clone, Debug, PartialEq)]
pub struct HypernetParams<S: Real> {
    pub config: HypernetConfig,
    pub heads: Vec<HyperHead<S>>,
}

impl<S: Real> HypernetParams<S> {
    /// Kaiming-normal hidden layers; output layers scaled by
    /// [`OUTPUT_INIT_SCALE`] with their bias set to a standard field init.
    pub fn init(config: &HypernetConfig, seed: u64) -> Result<Self, HypernetError> {
        config.field.validate()?;
        let target = NerfParams::<S>::init(&config.field, seed ^ 0x5eed_f1e1d);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let heads = config
            .heads()
            .into_iter()
            .map(|(code, tgt, out)| {
                let dims = [config.code_dim(code), config.hidden, config.hidden, out];
                let layers = (0..3)
                    .map(|k| {
                        let (fan_in, fan_out) = (dims[k], dims[k + 1]);
                        let scale = if k == 2 { OUTPUT_INIT_SCALE } else { 1.0 };
                        let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt() * scale).unwrap();
                        let weight = Tensor::from_fn(&[fan_in, fan_out], |_| S::lit(normal.sample(&mut rng)));
                        let bias = if k == 2 {
                            Tensor::new(vec![fan_out], flatten_target(&target, tgt)).unwrap()
                        } else {
                            Tensor::zeros(&[fan_out])
                        };
                        Layer { weight, bias }
                    })
                    .collect();
                HyperHead {
                    code,
                    target: tgt,
                    layers,
                }
            })
            .collect();
        Ok(Self {
            config: config.clone(),
            heads,
        })
    }

    pub fn tensors(&self) -> Vec<&Tensor<S>> {
        self.heads
            .iter()
            .flat_map(|h| h.layers.iter().flat_map(|l| [&l.weight, &l.bias]))
            .collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<S>> {
        self.heads
            .iter_mut()
            .flat_map(|h| h.layers.iter_mut().flat_map(|l| [&mut l.weight, &mut l.bias]))
            .collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn cast<T: Real>(&self) -> HypernetParams<T> {
        HypernetParams {
            config: self.config.clone(),
            heads: self
                .heads
                .iter()
                .map(|h| HyperHead {
                    code: h.code,
                    target: h.target,
                    layers: h
                        .layers
                        .iter()
                        .map(|l| Layer {
                            weight: l.weight.cast(),
                            bias: l.bias.cast(),
                        })
                        .collect(),
                })
                .collect(),
        }
    }

    /// CRC32 over every weight's bit pattern, in `tensors()` order.
    pub fn checksum(&self) -> u32 {
        let mut h = crc32fast::Hasher::new();
        for t in self.tensors() {
            for v in t.data() {
                h.update(&v.f64().to_bits().to_le_bytes());
            }
        }
        h.finalize()
    }

    /// Places all weights on the tape, trainable or constant.
    pub fn place(&self, tape: &mut Tape<S>, trainable: bool) -> HypernetVars {
        HypernetVars {
            heads: self
                .heads
                .iter()
                .map(|h| {
                    h.layers
                        .iter()
                        .map(|l| {
                            if trainable {
                                (tape.leaf(l.weight.clone()), tape.leaf(l.bias.clone()))
                            } else {
                                (tape.constant(l.weight.clone()), tape.constant(l.bias.clone()))
                            }
                        })
                        .collect()
                })
                .collect(),
        }
    }

    /// Gradient-free prediction of one instance's field.
    pub fn predict(&self, codes: &InstanceCodes) -> Result<NerfParams<S>, HypernetError> {
        let mut tape = Tape::new();
        let vars = self.place(&mut tape, false);
        let s = tape.constant(code_tensor(&codes.shape));
        let c = tape.constant(code_tensor(&codes.color));
        let field = predict_on_tape(&mut tape, self, &vars, s, c)?;
        Ok(field_values(&tape, &field))
    }
}

/// Tape handles of the hypernetwork weights, `[head][layer] = (W, b)`.
#[derive(Clone, Debug)]
pub struct HypernetVars {
    pub heads: Vec<Vec<(Var, Var)>>,
}

impl HypernetVars {
    pub fn vars(&self) -> Vec<Var> {
        self.heads
            .iter()
            .flat_map(|h| h.iter().flat_map(|&(w, b)| [w, b]))
            .collect()
    }
}

fn flatten_target<S: Real>(target: &NerfParams<S>, tgt: HeadTarget) -> Vec<S> {
    match tgt {
        HeadTarget::Tables => target.tables.as_ref().expect("hash config has tables").data().to_vec(),
        HeadTarget::Layer(l) => {
            let layer = &target.layers[l];
            let mut v = layer.weight.data().to_vec();
            v.extend_from_slice(layer.bias.data());
            v
        }
    }
}

pub fn code_tensor<S: Real>(code: &[f32]) -> Tensor<S> {
    Tensor::from_fn(&[1, code.len()], |i| S::lit(code[i] as f64))
}

/// Records the hypernetwork forward pass for codes `shape` and `color`
/// (each `[1, d]`), returning handles to every predicted field tensor.
pub fn predict_on_tape<S: Real>(
    tape: &mut Tape<S>,
    params: &HypernetParams<S>,
    vars: &HypernetVars,
    shape: Var,
    color: Var,
) -> Result<FieldVars, HypernetError> {
    let cfg = &params.config;
    for (var, kind) in [(shape, CodeKind::Shape), (color, CodeKind::Color)] {
        let got = tape.value(var).len();
        if got != cfg.code_dim(kind) {
            return Err(HypernetError::CodeDim {
                expected: cfg.code_dim(kind),
                got,
            });
        }
    }
    let shapes = cfg.field.layer_shapes();
    let mut tables = None;
    let mut layers = vec![None; shapes.len()];
    for (head, hv) in params.heads.iter().zip(&vars.heads) {
        let mut x = match head.code {
            CodeKind::Shape => shape,
            CodeKind::Color => color,
        };
        for (k, &(w, b)) in hv.iter().enumerate() {
            x = tape.affine(x, w, b)?;
            if k + 1 < hv.len() {
                x = tape.relu(x)?;
            }
        }
        match head.target {
            HeadTarget::Tables => {
                let shape = cfg.field.table_shape().expect("tables head implies a hash grid");
                tables = Some(tape.reshape(x, &shape)?);
            }
            HeadTarget::Layer(l) => {
                let (i, o) = shapes[l];
                let w = tape.narrow(x, 0, &[i, o])?;
                let b = tape.narrow(x, i * o, &[o])?;
                layers[l] = Some((w, b));
            }
        }
    }
    Ok(FieldVars {
        tables,
        layers: layers.into_iter().map(|l| l.expect("every layer has a head")).collect(),
    })
}

/// Reads predicted field tensors off a tape.
pub fn field_values<S: Real>(tape: &Tape<S>, vars: &FieldVars) -> NerfParams<S> {
    NerfParams {
        tables: vars.tables.map(|t| tape.value(t).clone()),
        layers: vars
            .layers
            .iter()
            .map(|&(w, b)| Layer {
                weight: tape.value(w).clone(),
                bias: tape.value(b).clone(),
            })
            .collect(),
    }
}

/// Shape and color code of one instance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InstanceCodes {
    pub shape: Vec<f32>,
    pub color: Vec<f32>,
}

impl InstanceCodes {
    pub fn zeros(cfg: &HypernetConfig) -> Self {
        Self {
            shape: vec![0.0; cfg.shape_dim],
            color: vec![0.0; cfg.color_dim],
        }
    }

    pub fn check(&self, cfg: &HypernetConfig) -> Result<(), HypernetError> {
        for (code, kind) in [(&self.shape, CodeKind::Shape), (&self.color, CodeKind::Color)] {
            if code.len() != cfg.code_dim(kind) {
                return Err(HypernetError::CodeDim {
                    expected: cfg.code_dim(kind),
                    got: code.len(),
                });
            }
        }
        Ok(())
    }

    /// Shape code followed by color code.
    pub fn concat(&self) -> Vec<f32> {
        let mut v = self.shape.clone();
        v.extend_from_slice(&self.color);
        v
    }

    pub fn split(flat: &[f32], shape_dim: usize) -> Self {
        Self {
            shape: flat[..shape_dim].to_vec(),
            color: flat[shape_dim..].to_vec(),
        }
    }
}

/// Exchanges color codes: `(S_a ⊕ C_b, S_b ⊕ C_a)`.
pub fn swap_codes(a: &InstanceCodes, b: &InstanceCodes) -> Result<(InstanceCodes, InstanceCodes), HypernetError> {
    for (x, y) in [(&a.shape, &b.shape), (&a.color, &b.color)] {
        if x.len() != y.len() {
            return Err(HypernetError::CodeDim {
                expected: x.len(),
                got: y.len(),
            });
        }
    }
    Ok((
        InstanceCodes {
            shape: a.shape.clone(),
            color: b.color.clone(),
        },
        InstanceCodes {
            shape: b.shape.clone(),
            color: a.color.clone(),
        },
    ))
}

/// Per-instance codes in insertion order.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Codebook {
    ids: Vec<String>,
    codes: Vec<InstanceCodes>,
}

impl Codebook {
    /// Codes drawn from `N(0, std²)`.
    pub fn random(ids: &[String], cfg: &HypernetConfig, std: f64, seed: u64) -> Result<Self, HypernetError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, std).map_err(|e| TensorError::Invalid(e.to_string()))?;
        let mut book = Self::default();
        for id in ids {
            let mut draw = |n: usize| (0..n).map(|_| normal.sample(&mut rng) as f32).collect::<Vec<_>>();
            let codes = InstanceCodes {
                shape: draw(cfg.shape_dim),
                color: draw(cfg.color_dim),
            };
            book.insert(id.clone(), codes)?;
        }
        Ok(book)
    }

    pub fn insert(&mut self, id: String, codes: InstanceCodes) -> Result<(), HypernetError> {
        if self.ids.contains(&id) {
            return Err(HypernetError::DuplicateId(id));
        }
        if let Some(first) = self.codes.first() {
            for (x, y) in [(first.shape.len(), codes.shape.len()), (first.color.len(), codes.color.len())] {
                if x != y {
                    return Err(HypernetError::CodeDim { expected: x, got: y });
                }
            }
        }
        self.ids.push(id);
        self.codes.push(codes);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn codes(&self) -> &[InstanceCodes] {
        &self.codes
    }

    pub fn get(&self, index: usize) -> &InstanceCodes {
        &self.codes[index]
    }

    pub fn get_mut(&mut self, index: usize) -> &mut InstanceCodes {
        &mut self.codes[index]
    }

    pub fn index_of(&self, id: &str) -> Result<usize, HypernetError> {
        self.ids
            .iter()
            .position(|i| i == id)
            .ok_or_else(|| HypernetError::UnknownId(id.into()))
    }

    /// Elementwise mean of all codes.
    pub fn mean(&self) -> Result<InstanceCodes, HypernetError> {
        let first = self.codes.first().ok_or(HypernetError::EmptyCodebook)?;
        let n = self.codes.len() as f64;
        let avg = |pick: fn(&InstanceCodes) -> &Vec<f32>, len: usize| {
            (0..len)
                .map(|k| (self.codes.iter().map(|c| pick(c)[k] as f64).sum::<f64>() / n) as f32)
                .collect()
        };
        Ok(InstanceCodes {
            shape: avg(|c| &c.shape, first.shape.len()),
            color: avg(|c| &c.color, first.color.len()),
        })
    }

    /// Index of the entry nearest to `codes` in L2 (ties go to the lowest index).
    pub fn nearest(&self, codes: &InstanceCodes) -> Result<usize, HypernetError> {
        Ok(self.ranked(codes)?[0])
    }

    /// All indices sorted by L2 distance to `codes`, ties by index.
    pub fn ranked(&self, codes: &InstanceCodes) -> Result<Vec<usize>, HypernetError> {
        if self.is_empty() {
            return Err(HypernetError::EmptyCodebook);
        }
        let q = codes.concat();
        let dists: Vec<f64> = self
            .codes
            .iter()
            .map(|c| {
                let e = c.concat();
                if e.len() != q.len() {
                    return Err(HypernetError::CodeDim {
                        expected: e.len(),
                        got: q.len(),
                    });
                }
                Ok(e.iter().zip(&q).map(|(a, b)| ((a - b) as f64).powi(2)).sum())
            })
            .collect::<Result<_, _>>()?;
        let mut order: Vec<usize> = (0..dists.len()).collect();
        order.sort_by(|&a, &b| dists[a].total_cmp(&dists[b]).then(a.cmp(&b)));
        Ok(order)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::field_eval;
    use crate::hash_encoding::HashGridConfig;
    use rand::Rng;

    fn small_config() -> HypernetConfig {
        HypernetConfig {
            shape_dim: 8,
            color_dim: 6,
            hidden: 32,
            field: FieldConfig::hash(HashGridConfig {
                levels: 4,
                table_size: 64,
                features: 2,
                n_min: 2,
                n_max: 16,
            }),
        }
    }

    fn codes(cfg: &HypernetConfig, seed: u64) -> InstanceCodes {
        let ids = vec!["x".to_string()];
        Codebook::random(&ids, cfg, 0.5, seed).unwrap().get(0).clone()
    }

    #[test]
    fn structure_counts() {
        let cfg = HypernetConfig::default();
        let heads = cfg.heads();
        assert_eq!(heads.len(), 6);
        assert_eq!(heads[0], (CodeKind::Shape, HeadTarget::Tables, 16 * 2048 * 2));
        assert_eq!(heads.iter().filter(|h| h.0 == CodeKind::Color).count(), 2);
        let p = HypernetParams::<f32>::init(&small_config(), 1).unwrap();
        assert_eq!(p.tensors().len(), 6 * 3 * 2);
        assert_eq!(p.parameter_count(), small_config().parameter_count());
        let posenc = HypernetConfig {
            field: FieldConfig::frequency(10),
            ..small_config()
        };
        assert_eq!(posenc.heads().len(), 10);
    }

    #[test]
    fn init_is_seeded_and_close_to_field_init() {
        let cfg = small_config();
        let a = HypernetParams::<f32>::init(&cfg, 7).unwrap();
        assert_eq!(a, HypernetParams::<f32>::init(&cfg, 7).unwrap());
        assert_ne!(a, HypernetParams::<f32>::init(&cfg, 8).unwrap());
        let pred = a.predict(&codes(&cfg, 3)).unwrap();
        let direct = NerfParams::<f32>::init(&cfg.field, 7 ^ 0x5eed_f1e1d);
        let dev = pred
            .tensors()
            .iter()
            .zip(direct.tensors())
            .map(|(p, d)| p.max_abs_diff(d))
            .fold(0.0, f64::max);
        assert!(dev > 0.0 && dev < 0.05, "{dev}");
    }

    #[test]
    fn prediction_is_deterministic_and_checks_dims() {
        let cfg = small_config();
        let p = HypernetParams::<f32>::init(&cfg, 2).unwrap();
        let c = codes(&cfg, 4);
        assert_eq!(p.predict(&c).unwrap(), p.predict(&c).unwrap());
        let bad = InstanceCodes {
            shape: vec![0.0; 3],
            color: c.color.clone(),
        };
        assert!(matches!(p.predict(&bad), Err(HypernetError::CodeDim { .. })));
    }

    #[test]
    fn density_ignores_color_code() {
        let cfg = small_config();
        let mut p = HypernetParams::<f32>::init(&cfg, 5).unwrap();
        for t in p.tensors_mut() {
            for v in t.data_mut() {
                *v *= 20.0;
            }
        }
        let a = codes(&cfg, 1);
        let mut b = a.clone();
        b.color = codes(&cfg, 2).color;
        let (pa, pb) = (p.predict(&a).unwrap(), p.predict(&b).unwrap());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut color_differs = false;
        for _ in 0..200 {
            let x = [rng.random(), rng.random(), rng.random()];
            let d = [rng.random_range(-1.0..1.0), 0.3, rng.random_range(-1.0..1.0)];
            let oa = field_eval(&pa, &cfg.field, x, d).unwrap();
            let ob = field_eval(&pb, &cfg.field, x, d).unwrap();
            assert_eq!(oa.sigma.to_bits(), ob.sigma.to_bits());
            color_differs |= oa.rgb != ob.rgb;
        }
        assert!(color_differs);
    }

    #[test]
    fn code_gradients_match_finite_differences() {
        let cfg = small_config();
        let p = HypernetParams::<f64>::init(&cfg, 9).unwrap();
        let c = codes(&cfg, 6);
        let probe: Vec<f64> = (0..cfg.field.parameter_count()).map(|i| ((i * 37) % 11) as f64 - 5.0).collect();
        for kind in [CodeKind::Shape, CodeKind::Color] {
            let point = match kind {
                CodeKind::Shape => code_tensor::<f64>(&c.shape),
                CodeKind::Color => code_tensor::<f64>(&c.color),
            };
            let err = crate::tensor::finite_diff_check(
                |tape, x| {
                    let vars = p.place(tape, false);
                    let (s, col) = match kind {
                        CodeKind::Shape => (x, tape.constant(code_tensor(&c.color))),
                        CodeKind::Color => (tape.constant(code_tensor(&c.shape)), x),
                    };
                    let f = predict_on_tape(tape, &p, &vars, s, col)
                        .map_err(|e| TensorError::Invalid(e.to_string()))?;
                    // Random linear functional of all predicted parameters.
                    let mut total = None;
                    let mut offset = 0;
                    for v in f.vars() {
                        let n = tape.value(v).len();
                        let flat = tape.reshape(v, &[1, n])?;
                        let w = tape.constant(Tensor::new(vec![n, 1], probe[offset..offset + n].to_vec())?);
                        let zero = tape.constant(Tensor::zeros(&[1]));
                        let dot = tape.affine(flat, w, zero)?;
                        offset += n;
                        total = Some(match total {
                            None => dot,
                            Some(t) => tape.add(t, dot)?,
                        });
                    }
                    tape.sum(total.unwrap())
                },
                &point,
                1e-3,
            )
            .unwrap();
            assert!(err < 1e-4, "{kind:?}: {err}");
        }
    }

    #[test]
    fn swap_is_an_involution() {
        let cfg = small_config();
        let (a, b) = (codes(&cfg, 1), codes(&cfg, 2));
        let (ab, ba) = swap_codes(&a, &b).unwrap();
        assert_eq!(ab.shape, a.shape);
        assert_eq!(ab.color, b.color);
        let (a2, b2) = swap_codes(&ab, &ba).unwrap();
        assert_eq!((a2, b2), (a.clone(), b));
        let short = InstanceCodes {
            shape: vec![0.0; 2],
            color: a.color.clone(),
        };
        assert!(swap_codes(&a, &short).is_err());
    }

    #[test]
    fn codebook_queries() {
        let cfg = HypernetConfig {
            shape_dim: 1,
            color_dim: 1,
            ..small_config()
        };
        let mut book = Codebook::default();
        for (id, v) in [("a", 0.0), ("b", 2.0), ("c", -2.0)] {
            book.insert(
                id.into(),
                InstanceCodes {
                    shape: vec![v],
                    color: vec![0.0],
                },
            )
            .unwrap();
        }
        assert!(matches!(
            book.insert("a".into(), InstanceCodes::zeros(&cfg)),
            Err(HypernetError::DuplicateId(_))
        ));
        assert_eq!(book.nearest(book.get(1)).unwrap(), 1);
        let tie = InstanceCodes {
            shape: vec![1.0],
            color: vec![0.0],
        };
        assert_eq!(book.nearest(&tie).unwrap(), 0);
        let tie = InstanceCodes {
            shape: vec![0.0],
            color: vec![0.0],
        };
        assert_eq!(book.ranked(&tie).unwrap(), vec![0, 1, 2]);
        assert_eq!(book.mean().unwrap().shape, vec![0.0]);
        assert_eq!(book.index_of("c").unwrap(), 2);
        assert!(Codebook::default().mean().is_err());
    }
}
