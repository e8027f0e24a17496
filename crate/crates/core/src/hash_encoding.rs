//! Multi-resolution hash encoding over the unit cube.
//!
//! Tables are not owned here: they arrive as a single `[L·T, F]` tensor
//! (level-major rows) produced by the hypernetwork or loaded from a
//! checkpoint, and gradients flow back into that tensor through the tape.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{CustomOp, Real, Tape, Tensor, TensorError, Var};

const PRIMES: [u32; 3] = [1, 2_654_435_761, 805_459_861];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum HashGridError {
    #[error("hash grid needs at least one level")]
    NoLevels,
    #[error("table size {0} is not a power of two")]
    TableSize(usize),
    #[error("invalid hash grid config: {0}")]
    Invalid(String),
    #[error("grid coordinate {coord:?} outside [0, {resolution}]")]
    CoordOutOfRange { coord: [u32; 3], resolution: u32 },
    #[error("position {0:?} outside the unit cube")]
    OutsideUnitCube([f64; 3]),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HashGridConfig {
    pub levels: usize,
    pub table_size: usize,
    pub features: usize,
    pub n_min: u32,
    pub n_max: u32,
}

impl Default for HashGridConfig {
    /// 16 levels, 2^11 entries, 2 features, resolutions 16..=256.
    fn default() -> Self {
        Self {
            levels: 16,
            table_size: 1 << 11,
            features: 2,
            n_min: 16,
            n_max: 256,
        }
    }
}

impl HashGridConfig {
    pub fn validate(&self) -> Result<(), HashGridError> {
        if self.levels == 0 {
            return Err(HashGridError::NoLevels);
        }
        if !self.table_size.is_power_of_two() {
            return Err(HashGridError::TableSize(self.table_size));
        }
        if self.features == 0 || self.n_min == 0 || self.n_min > self.n_max {
            return Err(HashGridError::Invalid(format!(
                "features={} n_min={} n_max={}",
                self.features, self.n_min, self.n_max
            )));
        }
        Ok(())
    }

    /// Per-level growth factor `b`.
    pub fn growth(&self) -> f64 {
        if self.levels == 1 {
            return 1.0;
        }
        ((self.n_max as f64).ln() - (self.n_min as f64).ln()) / (self.levels - 1) as f64
    }

    /// `N_l = floor(n_min · b^l)`; the first and last levels land exactly on
    /// `n_min` and `n_max`.
    pub fn level_resolutions(&self) -> Result<Vec<u32>, HashGridError> {
        self.validate()?;
        let log_b = self.growth();
        Ok((0..self.levels)
            .map(|l| {
                let v = self.n_min as f64 * (log_b * l as f64).exp();
                // Absorb rounding so exact powers do not floor one below.
                (v + 1e-9 * v).floor() as u32
            })
            .collect())
    }

    /// Length of the encoded feature vector.
    pub fn output_dim(&self) -> usize {
        self.levels * self.features
    }

    /// Total table entries across all levels.
    pub fn table_rows(&self) -> usize {
        self.levels * self.table_size
    }

    pub fn parameter_count(&self) -> usize {
        self.table_rows() * self.features
    }

    pub fn is_dense(&self, resolution: u32) -> bool {
        let side = resolution as u64 + 1;
        side * side * side <= self.table_size as u64
    }
}

/// Row of `coord` within one level's table.
pub fn hash_index(
    coord: [u32; 3],
    resolution: u32,
    config: &HashGridConfig,
) -> Result<usize, HashGridError> {
    if coord.iter().any(|&c| c > resolution) {
        return Err(HashGridError::CoordOutOfRange { coord, resolution });
    }
    Ok(index_unchecked(coord, resolution, config))
}

#[inline]
fn index_unchecked(coord: [u32; 3], resolution: u32, config: &HashGridConfig) -> usize {
    if config.is_dense(resolution) {
        let side = resolution as usize + 1;
        coord[0] as usize + side * (coord[1] as usize + side * coord[2] as usize)
    } else {
        let h = coord[0].wrapping_mul(PRIMES[0])
            ^ coord[1].wrapping_mul(PRIMES[1])
            ^ coord[2].wrapping_mul(PRIMES[2]);
        (h as usize) & (config.table_size - 1)
    }
}

/// Corner rows and trilinear weights of every (point, level) pair.
struct Stencil<S> {
    rows: Vec<u32>,
    weights: Vec<S>,
    fracs: Vec<S>,
}

fn build_stencil<S: Real>(
    positions: &Tensor<S>,
    config: &HashGridConfig,
    resolutions: &[u32],
) -> Result<Stencil<S>, HashGridError> {
    let n = positions.rows();
    let levels = resolutions.len();
    let mut rows = Vec::with_capacity(n * levels * 8);
    let mut weights = Vec::with_capacity(n * levels * 8);
    let mut fracs = Vec::with_capacity(n * levels * 3);
    for p in 0..n {
        let x = positions.row(p);
        if x.iter().any(|&v| !(v >= S::zero() && v <= S::one())) {
            return Err(HashGridError::OutsideUnitCube([
                x[0].f64(),
                x[1].f64(),
                x[2].f64(),
            ]));
        }
        for (l, &res) in resolutions.iter().enumerate() {
            let scale = S::lit(res as f64);
            let mut cell = [0u32; 3];
            let mut frac = [S::zero(); 3];
            for d in 0..3 {
                let pos = x[d] * scale;
                let c = pos.floor().to_u32().unwrap_or(0).min(res.saturating_sub(1));
                cell[d] = c;
                frac[d] = pos - S::lit(c as f64);
            }
            fracs.extend_from_slice(&frac);
            let base = (l * config.table_size) as u32;
            for corner in 0..8u32 {
                let mut w = S::one();
                let mut coord = [0u32; 3];
                for d in 0..3 {
                    let bit = (corner >> d) & 1;
                    coord[d] = cell[d] + bit;
                    w *= if bit == 1 { frac[d] } else { S::one() - frac[d] };
                }
                rows.push(base + index_unchecked(coord, res, config) as u32);
                weights.push(w);
            }
        }
    }
    Ok(Stencil {
        rows,
        weights,
        fracs,
    })
}

/// Trilinear weights of the 8 cell corners for `x` at one resolution
/// (corner bit `d` set means the upper vertex along axis `d`).
pub fn trilinear_weights(x: [f64; 3], resolution: u32) -> [f64; 8] {
    let mut frac = [0.0; 3];
    for d in 0..3 {
        let pos = x[d] * resolution as f64;
        let c = (pos.floor() as u32).min(resolution.saturating_sub(1));
        frac[d] = pos - c as f64;
    }
    let mut w = [1.0; 8];
    for (corner, wc) in w.iter_mut().enumerate() {
        for (d, f) in frac.iter().enumerate() {
            *wc *= if (corner >> d) & 1 == 1 { *f } else { 1.0 - f };
        }
    }
    w
}

/// Encodes `positions` (`[K, 3]`, unit cube) into `[K, L·F]` features.
/// Differentiable with respect to both the tables and the positions.
pub fn encode<S: Real>(
    tape: &mut Tape<S>,
    positions: Var,
    tables: Var,
    config: &HashGridConfig,
) -> Result<Var, HashGridError> {
    let resolutions = config.level_resolutions()?;
    let tv = tape.value(tables);
    if tv.shape() != [config.table_rows(), config.features] {
        return Err(TensorError::ShapeMismatch {
            op: "hash encode tables",
            expected: vec![config.table_rows(), config.features],
            got: tv.shape().to_vec(),
        }
        .into());
    }
    let pv = tape.value(positions);
    if pv.cols() != 3 || pv.shape().len() != 2 {
        return Err(TensorError::ShapeMismatch {
            op: "hash encode positions",
            expected: vec![pv.rows(), 3],
            got: pv.shape().to_vec(),
        }
        .into());
    }
    let stencil = build_stencil(pv, config, &resolutions)?;
    let n = pv.rows();
    let (levels, feats) = (config.levels, config.features);
    let table = tv.data();
    let mut out = vec![S::zero(); n * levels * feats];
    for p in 0..n {
        for l in 0..levels {
            let s = (p * levels + l) * 8;
            let dst = &mut out[(p * levels + l) * feats..(p * levels + l + 1) * feats];
            for c in 0..8 {
                let row = stencil.rows[s + c] as usize;
                let w = stencil.weights[s + c];
                for (o, &v) in dst.iter_mut().zip(&table[row * feats..(row + 1) * feats]) {
                    *o += w * v;
                }
            }
        }
    }
    let output = Tensor::new(vec![n, levels * feats], out)?;
    let op = HashEncodeOp {
        stencil,
        resolutions,
        levels,
        features: feats,
    };
    Ok(tape.custom(&[positions, tables], output, Box::new(op))?)
}

struct HashEncodeOp<S> {
    stencil: Stencil<S>,
    resolutions: Vec<u32>,
    levels: usize,
    features: usize,
}

impl<S: Real> CustomOp<S> for HashEncodeOp<S> {
    fn name(&self) -> &'static str {
        "hash_encode"
    }

    fn backward(
        &self,
        inputs: &[&Tensor<S>],
        needs_grad: &[bool],
        _output: &Tensor<S>,
        grad: &Tensor<S>,
    ) -> Vec<Option<Tensor<S>>> {
        let (positions, tables) = (inputs[0], inputs[1]);
        let n = positions.rows();
        let (levels, feats) = (self.levels, self.features);
        let g = grad.data();
        let st = &self.stencil;

        let d_tables = needs_grad[1].then(|| {
            let mut dt = vec![S::zero(); tables.len()];
            for p in 0..n {
                for l in 0..levels {
                    let s = (p * levels + l) * 8;
                    let gsrc = &g[(p * levels + l) * feats..(p * levels + l + 1) * feats];
                    for c in 0..8 {
                        let row = st.rows[s + c] as usize;
                        let w = st.weights[s + c];
                        for (acc, &gv) in dt[row * feats..(row + 1) * feats].iter_mut().zip(gsrc) {
                            *acc += w * gv;
                        }
                    }
                }
            }
            Tensor::new(tables.shape().to_vec(), dt).expect("table grad shape")
        });

        let d_positions = needs_grad[0].then(|| {
            let table = tables.data();
            let mut dx = vec![S::zero(); n * 3];
            for p in 0..n {
                for l in 0..levels {
                    let s = (p * levels + l) * 8;
                    let f = &st.fracs[(p * levels + l) * 3..(p * levels + l + 1) * 3];
                    let gsrc = &g[(p * levels + l) * feats..(p * levels + l + 1) * feats];
                    let scale = S::lit(self.resolutions[l] as f64);
                    for c in 0..8 {
                        let row = st.rows[s + c] as usize;
                        let dot: S = table[row * feats..(row + 1) * feats]
                            .iter()
                            .zip(gsrc)
                            .map(|(&t, &gv)| t * gv)
                            .sum();
                        for d in 0..3 {
                            // ∂w/∂f_d: ±1 along d times the other two factors.
                            let mut dw = if (c >> d) & 1 == 1 { S::one() } else { -S::one() };
                            for e in 0..3 {
                                if e != d {
                                    dw *= if (c >> e) & 1 == 1 { f[e] } else { S::one() - f[e] };
                                }
                            }
                            dx[p * 3 + d] += dw * scale * dot;
                        }
                    }
                }
            }
            Tensor::new(vec![n, 3], dx).expect("position grad shape")
        });

        vec![d_positions, d_tables]
    }
}
