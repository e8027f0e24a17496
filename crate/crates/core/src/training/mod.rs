//! Prior training, test-time code optimization and the embedding query network.

mod persist;
mod query;
mod tto;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::field::{render_batch, FieldConfig, FieldError, NerfParams, Ray, RenderConfig};
use crate::hypernet::{
    code_tensor, field_values, predict_on_tape, Codebook, HypernetConfig, HypernetError, HypernetParams,
    HypernetVars, InstanceCodes,
};
use crate::scene::{camera_ray, CameraIntrinsics, CheckpointError, SceneDataset, SceneError, View};
use crate::seed;
use crate::tensor::{AdamConfig, AdamState, CustomOp, Real, Tape, Tensor, TensorError, Var};

pub use persist::FieldModel;
pub use query::{
    query, train_query_net, view_embeddings, Embedder, FileEmbedding, QueryConfig, QueryNetParams, QueryResult,
    TrivialEmbedding,
};
pub use tto::{test_time_optimize, TtoConfig, TtoInit, TtoResult};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("dataset has no instances")]
    EmptyDataset,
    #[error("no posed views to fit")]
    NoViews,
    #[error("non-finite value at step {step}: {detail}")]
    NonFinite { step: usize, detail: String },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("embedding: {0}")]
    Embedding(String),
    #[error(transparent)]
    Field(#[from] FieldError),
    #[error(transparent)]
    Hypernet(#[from] HypernetError),
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

impl TrainError {
    /// Whether the failure is numerical rather than a data or config problem.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            TrainError::NonFinite { .. } | TrainError::Tensor(TensorError::NonFinite { .. })
        )
    }
}

/// Photometric loss between rendered and ground-truth pixels.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossNorm {
    /// Mean over rays and channels of the squared difference.
    #[default]
    Squared,
    /// Mean absolute difference.
    Absolute,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub rays_per_batch: usize,
    pub instances_per_batch: usize,
    pub lr: f64,
    /// Learning rate decays exponentially to `lr * lr_final_factor` at the last step.
    pub lr_final_factor: f64,
    pub seed: u64,
    pub loss: LossNorm,
    pub render: RenderConfig,
    /// Rays per gradient chunk. Fixed so results do not depend on thread count.
    pub chunk_rays: usize,
    /// Standard deviation of the initial codes.
    pub code_init_std: f64,
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 4000,
            rays_per_batch: 512,
            instances_per_batch: 1,
            lr: 1e-3,
            lr_final_factor: 0.1,
            seed: 0,
            loss: LossNorm::Squared,
            render: RenderConfig {
                samples_per_ray: 32,
                stratified: true,
                ..RenderConfig::default()
            },
            chunk_rays: 128,
            code_init_std: 0.1,
            log_every: 100,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.rays_per_batch == 0 || self.instances_per_batch == 0 || self.chunk_rays == 0 {
            return Err(TrainError::Config("batch sizes must be positive".into()));
        }
        if self.render.samples_per_ray == 0 {
            return Err(TrainError::Config("samples_per_ray must be positive".into()));
        }
        if !(self.lr > 0.0) || !(self.lr_final_factor > 0.0) {
            return Err(TrainError::Config("learning rates must be positive".into()));
        }
        Ok(())
    }

    /// Learning rate in effect at `step`.
    pub fn lr_at(&self, step: usize) -> f64 {
        let progress = if self.steps > 1 {
            step as f64 / (self.steps - 1) as f64
        } else {
            0.0
        };
        self.lr * self.lr_final_factor.powf(progress)
    }
}

/// One progress record, printed as `key=value` pairs.
#[derive(Clone, Debug, PartialEq)]
pub struct StepLog {
    pub step: usize,
    pub loss: f64,
    pub psnr: f64,
    pub lr: f64,
}

impl std::fmt::Display for StepLog {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "step={} loss={:.6e} psnr={:.3} lr={:.3e}",
            self.step, self.loss, self.psnr, self.lr
        )
    }
}

/// The learned prior: hypernetwork weights plus per-instance codes.
#[derive(Clone, Debug, PartialEq)]
pub struct PriorModel {
    pub hypernet: HypernetParams<f32>,
    pub codebook: Codebook,
    pub seed: u64,
}

impl PriorModel {
    pub fn init(ids: &[String], config: &HypernetConfig, code_std: f64, seed: u64) -> Result<Self, TrainError> {
        if ids.is_empty() {
            return Err(TrainError::EmptyDataset);
        }
        Ok(Self {
            hypernet: HypernetParams::init(config, seed::substream(seed, "init"))?,
            codebook: Codebook::random(ids, config, code_std, seed::substream(seed, "codes"))?,
            seed,
        })
    }

    pub fn config(&self) -> &HypernetConfig {
        &self.hypernet.config
    }

    pub fn instance_params(&self, index: usize) -> Result<NerfParams<f32>, TrainError> {
        Ok(self.hypernet.predict(self.codebook.get(index))?)
    }

    pub fn params_for(&self, codes: &InstanceCodes) -> Result<NerfParams<f32>, TrainError> {
        codes.check(self.config())?;
        Ok(self.hypernet.predict(codes)?)
    }

    /// CRC32 over hypernetwork weights and codebook.
    pub fn checksum(&self) -> u32 {
        let mut h = crc32fast::Hasher::new();
        h.update(&self.hypernet.checksum().to_le_bytes());
        for c in self.codebook.codes() {
            for v in c.shape.iter().chain(&c.color) {
                h.update(&v.to_bits().to_le_bytes());
            }
        }
        h.finalize()
    }
}

/// Every pixel of a set of views as a ray plus its ground-truth color. Ray
/// ids are `view * width * height + pixel`, which keys stratified jitter.
#[derive(Clone, Debug, Default)]
pub struct RayPool {
    pub rays: Vec<(Option<Ray>, u64)>,
    pub targets: Vec<[f32; 3]>,
}

impl RayPool {
    pub fn from_views(intrinsics: &CameraIntrinsics, views: &[View]) -> Result<Self, TrainError> {
        let (w, h) = (intrinsics.width, intrinsics.height);
        let mut pool = Self::default();
        for (k, view) in views.iter().enumerate() {
            if view.image.width != w || view.image.height != h {
                return Err(TrainError::Config(format!(
                    "view {k} is {}x{}, intrinsics say {w}x{h}",
                    view.image.width, view.image.height
                )));
            }
            for v in 0..h {
                for u in 0..w {
                    let ray = camera_ray(intrinsics, &view.pose, u, v)?;
                    pool.rays.push((ray, (k * w * h + v * w + u) as u64));
                    pool.targets.push(view.image.pixel(u, v));
                }
            }
        }
        Ok(pool)
    }

    pub fn len(&self) -> usize {
        self.rays.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rays.is_empty()
    }

    /// `count` rays drawn uniformly with replacement.
    pub fn sample(&self, rng: &mut impl Rng, count: usize) -> (Vec<(Option<Ray>, u64)>, Vec<[f32; 3]>) {
        (0..count)
            .map(|_| {
                let i = rng.random_range(0..self.len());
                (self.rays[i], self.targets[i])
            })
            .unzip()
    }
}

/// Mean absolute error with a subgradient of `sign(pred − target)`.
struct AbsLossOp<S: Real> {
    target: Tensor<S>,
}

impl<S: Real> CustomOp<S> for AbsLossOp<S> {
    fn name(&self) -> &'static str {
        "abs_loss"
    }

    fn backward(
        &self,
        inputs: &[&Tensor<S>],
        needs_grad: &[bool],
        _output: &Tensor<S>,
        grad: &Tensor<S>,
    ) -> Vec<Option<Tensor<S>>> {
        let n = S::lit(inputs[0].len().max(1) as f64);
        let g = grad.item() / n;
        let d = inputs[0]
            .data()
            .iter()
            .zip(self.target.data())
            .map(|(&p, &t)| if p > t { g } else if p < t { -g } else { S::zero() })
            .collect();
        vec![needs_grad[0].then(|| Tensor::new(inputs[0].shape().to_vec(), d).unwrap())]
    }
}

/// Photometric loss of rendered pixels `[R, 3]` against targets.
pub fn photometric_loss<S: Real>(
    tape: &mut Tape<S>,
    pred: Var,
    targets: &[[f32; 3]],
    norm: LossNorm,
) -> Result<Var, TensorError> {
    let rows = tape.value(pred).rows();
    if rows != targets.len() {
        return Err(TensorError::ShapeMismatch {
            op: "photometric_loss",
            expected: vec![rows, 3],
            got: vec![targets.len(), 3],
        });
    }
    let target = Tensor::new(
        vec![rows, 3],
        targets.iter().flatten().map(|&v| S::lit(v as f64)).collect(),
    )?;
    match norm {
        LossNorm::Squared => tape.mse(pred, &target),
        LossNorm::Absolute => {
            let n = S::lit(target.len().max(1) as f64);
            let v: S = tape
                .value(pred)
                .data()
                .iter()
                .zip(target.data())
                .map(|(&p, &t)| (p - t).abs())
                .sum::<S>()
                / n;
            tape.custom(&[pred], Tensor::scalar(v), Box::new(AbsLossOp { target }))
        }
    }
}

/// Mean-per-channel squared error between rendered and ground-truth pixels.
pub fn loss_eq2(rendered: &[[f32; 3]], truth: &[[f32; 3]]) -> Result<f64, TrainError> {
    if rendered.len() != truth.len() {
        return Err(TrainError::Config(format!(
            "{} rendered pixels vs {} ground-truth pixels",
            rendered.len(),
            truth.len()
        )));
    }
    if rendered.is_empty() {
        return Ok(0.0);
    }
    let sum: f64 = rendered
        .iter()
        .zip(truth)
        .flat_map(|(a, b)| (0..3).map(move |c| ((a[c] - b[c]) as f64).powi(2)))
        .sum();
    Ok(sum / (3 * rendered.len()) as f64)
}

/// PSNR of a mean squared error, capped at 100 dB.
pub fn mse_to_psnr(mse: f64) -> f64 {
    if mse < 1e-10 {
        100.0
    } else {
        (-10.0 * mse.log10()).min(100.0)
    }
}

/// Loss and field-parameter gradients for a batch of rays, computed in
/// fixed-size chunks on separate tapes (in parallel) and summed in chunk
/// order. `weight` scales the loss (e.g. `1/instances`).
pub fn field_gradients(
    cfg: &FieldConfig,
    params: &NerfParams<f32>,
    rays: &[(Option<Ray>, u64)],
    targets: &[[f32; 3]],
    render: &RenderConfig,
    norm: LossNorm,
    chunk: usize,
    weight: f64,
) -> Result<(f64, Vec<Tensor<f32>>), TrainError> {
    let total = rays.len() as f64;
    let parts: Vec<(f64, Vec<Tensor<f32>>)> = rays
        .par_chunks(chunk)
        .zip(targets.par_chunks(chunk))
        .map(|(r, t)| {
            let mut tape = Tape::new();
            let vars = params.leaves(&mut tape);
            let pred = render_batch(&mut tape, cfg, &vars, r, render)?;
            let loss = photometric_loss(&mut tape, pred, t, norm)?;
            let loss = tape.scale(loss, (weight * r.len() as f64 / total) as f32)?;
            let value = tape.value(loss).item() as f64;
            let mut grads = tape.backward(loss)?;
            let g = vars
                .vars()
                .into_iter()
                .zip(params.tensors())
                .map(|(v, p)| grads.take_or_zeros(v, p.shape()))
                .collect();
            Ok((value, g))
        })
        .collect::<Result<_, TrainError>>()?;
    let mut iter = parts.into_iter();
    let (mut loss, mut grads) = iter.next().ok_or(TrainError::NoViews)?;
    for (l, g) in iter {
        loss += l;
        for (acc, gi) in grads.iter_mut().zip(&g) {
            acc.add_assign(gi)?;
        }
    }
    Ok((loss, grads))
}

/// The whole differentiable chain codes → hypernetwork → field → render →
/// loss on a single tape. Training computes the same gradients in chunks;
/// this form is what gradient checks run against.
#[allow(clippy::too_many_arguments)]
pub fn prior_loss_on_tape<S: Real>(
    tape: &mut Tape<S>,
    hypernet: &HypernetParams<S>,
    vars: &HypernetVars,
    shape: Var,
    color: Var,
    rays: &[(Option<Ray>, u64)],
    targets: &[[f32; 3]],
    render: &RenderConfig,
    norm: LossNorm,
) -> Result<Var, TrainError> {
    let field = predict_on_tape(tape, hypernet, vars, shape, color)?;
    let pred = render_batch(tape, &hypernet.config.field, &field, rays, render)?;
    Ok(photometric_loss(tape, pred, targets, norm)?)
}

/// Adam state for each hypernetwork tensor.
pub(crate) fn adam_states<S: Real>(tensors: &[&Tensor<S>], lr: f64) -> Vec<AdamState> {
    let config = AdamConfig {
        lr,
        ..AdamConfig::default()
    };
    tensors.iter().map(|t| AdamState::new(t.len(), config)).collect()
}

/// Builds a prior for every instance of `dataset` and trains it.
pub fn train_prior(
    dataset: &SceneDataset,
    config: &HypernetConfig,
    train: &TrainConfig,
    log: &mut dyn FnMut(&StepLog),
) -> Result<PriorModel, TrainError> {
    let ids: Vec<String> = dataset.instances.iter().map(|i| i.id.clone()).collect();
    let mut model = PriorModel::init(&ids, config, train.code_init_std, train.seed)?;
    fit_prior(&mut model, dataset, train, log)?;
    Ok(model)
}

/// Trains an existing prior in place. Instance `n` of the dataset pairs with
/// codebook entry `n`.
pub fn fit_prior(
    model: &mut PriorModel,
    dataset: &SceneDataset,
    train: &TrainConfig,
    log: &mut dyn FnMut(&StepLog),
) -> Result<(), TrainError> {
    train.validate()?;
    if dataset.instances.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    if dataset.instances.len() != model.codebook.len() {
        return Err(TrainError::Config(format!(
            "dataset has {} instances, codebook has {}",
            dataset.instances.len(),
            model.codebook.len()
        )));
    }
    let pools = dataset
        .instances
        .iter()
        .map(|inst| RayPool::from_views(&inst.intrinsics, &inst.views))
        .collect::<Result<Vec<_>, _>>()?;
    if pools.iter().any(RayPool::is_empty) {
        return Err(TrainError::NoViews);
    }
    let per_step = train.instances_per_batch.min(pools.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed::substream(train.seed, "data"));
    let sampling = seed::substream(train.seed, "sampling");
    let mut omega_states = adam_states(&model.hypernet.tensors(), train.lr);
    let dims = (model.config().shape_dim, model.config().color_dim);
    let code_cfg = AdamConfig {
        lr: train.lr,
        ..AdamConfig::default()
    };
    let mut code_states: Vec<[AdamState; 2]> = (0..pools.len())
        .map(|_| [AdamState::new(dims.0, code_cfg), AdamState::new(dims.1, code_cfg)])
        .collect();
    let field_cfg = model.config().field.clone();

    for step in 0..train.steps {
        let lr = train.lr_at(step);
        let render = RenderConfig {
            seed: seed::indexed(sampling, step as u64),
            ..train.render.clone()
        };
        let chosen = index::sample(&mut rng, pools.len(), per_step).into_vec();
        let batches: Vec<_> = chosen
            .iter()
            .map(|&n| pools[n].sample(&mut rng, train.rays_per_batch))
            .collect();

        let mut tape = Tape::new();
        let hvars = model.hypernet.place(&mut tape, true);
        let mut seeds = Vec::new();
        let mut code_vars = Vec::new();
        let mut step_loss = 0.0;
        for (&n, (rays, targets)) in chosen.iter().zip(&batches) {
            let codes = model.codebook.get(n);
            let s = tape.leaf(code_tensor(&codes.shape));
            let c = tape.leaf(code_tensor(&codes.color));
            let field = predict_on_tape(&mut tape, &model.hypernet, &hvars, s, c)?;
            let params = field_values(&tape, &field);
            let (loss, grads) = field_gradients(
                &field_cfg,
                &params,
                rays,
                targets,
                &render,
                train.loss,
                train.chunk_rays,
                1.0 / per_step as f64,
            )
            .map_err(|e| numeric(e, step))?;
            step_loss += loss;
            seeds.extend(field.vars().into_iter().zip(grads));
            code_vars.push((n, s, c));
        }
        if !step_loss.is_finite() {
            return Err(TrainError::NonFinite {
                step,
                detail: format!("loss {step_loss}"),
            });
        }
        if step_loss == 0.0 {
            continue;
        }
        let mut grads = tape.backward_from(seeds)?;
        for ((t, v), state) in model
            .hypernet
            .tensors_mut()
            .into_iter()
            .zip(hvars.vars())
            .zip(&mut omega_states)
        {
            let g = grads.take_or_zeros(v, t.shape());
            state.config.lr = lr;
            state.step(t, &g)?;
        }
        for (n, s, c) in code_vars {
            let codes = model.codebook.get_mut(n);
            for (k, (var, code)) in [(s, &mut codes.shape), (c, &mut codes.color)].into_iter().enumerate() {
                let mut t = code_tensor::<f32>(code);
                let g = grads.take_or_zeros(var, t.shape());
                let state = &mut code_states[n][k];
                state.config.lr = lr;
                state.step(&mut t, &g)?;
                code.copy_from_slice(t.data());
            }
        }
        if train.log_every > 0 && (step % train.log_every == 0 || step + 1 == train.steps) {
            let mse = match train.loss {
                LossNorm::Squared => step_loss,
                LossNorm::Absolute => f64::NAN,
            };
            log(&StepLog {
                step,
                loss: step_loss,
                psnr: mse_to_psnr(mse),
                lr,
            });
        }
    }
    Ok(())
}

fn numeric(e: TrainError, step: usize) -> TrainError {
    if e.is_numeric() {
        TrainError::NonFinite {
            step,
            detail: e.to_string(),
        }
    } else {
        e
    }
}
