//! Render → denoise → finetune refinement of a single instance field.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::field::{render_image, FieldConfig, FieldError, NerfParams, RenderConfig};
use crate::scene::{
    orbit_ring, CameraIntrinsics, Checkpoint, CheckpointError, Image, ModelKind, Persist, Pose, SceneError, View,
};
use crate::seed;
use crate::tensor::{AdamConfig, AdamState, Tape, Tensor, TensorError, Var};
use crate::training::{field_gradients, mse_to_psnr, LossNorm, RayPool, StepLog, TrainError};

#[derive(Debug, Error)]
pub enum DenoiseError {
    #[error("no image pairs to train on")]
    EmptySet,
    #[error("image {index}: {reason}")]
    Shape { index: usize, reason: String },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Field(#[from] FieldError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Scene(#[from] SceneError),
}

/// Channel widths of the encoder; the decoder mirrors them.
const WIDTHS: [usize; 3] = [16, 32, 32];

/// One 3×3 convolution: weight `[out, in, 3, 3]`, bias `[out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv {
    pub weight: Tensor<f32>,
    pub bias: Tensor<f32>,
}

impl Conv {
    fn init(rng: &mut ChaCha8Rng, input: usize, output: usize, scale: f64) -> Self {
        let normal = Normal::new(0.0, (2.0 / (9 * input) as f64).sqrt()).expect("positive std");
        Self {
            weight: Tensor::from_fn(&[output, input, 3, 3], |_| (scale * normal.sample(rng)) as f32),
            bias: Tensor::zeros(&[output]),
        }
    }
}

/// Residual convolutional autoencoder: three stride-2 convolutions down,
/// three upsample + convolution stages up, output added to the input.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvDenoiser {
    pub convs: Vec<Conv>,
}

impl ConvDenoiser {
    /// The last convolution starts at zero, so a fresh denoiser is the identity.
    pub fn init(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let [a, b, c] = WIDTHS;
        let shapes = [(3, a), (a, b), (b, c), (c, b), (b, a), (a, 3)];
        let convs = shapes
            .iter()
            .enumerate()
            .map(|(i, &(inp, out))| Conv::init(&mut rng, inp, out, if i == 5 { 0.0 } else { 1.0 }))
            .collect();
        Self { convs }
    }

    fn place(&self, tape: &mut Tape<f32>, trainable: bool) -> Vec<(Var, Var)> {
        self.convs
            .iter()
            .map(|c| {
                if trainable {
                    (tape.leaf(c.weight.clone()), tape.leaf(c.bias.clone()))
                } else {
                    (tape.constant(c.weight.clone()), tape.constant(c.bias.clone()))
                }
            })
            .collect()
    }

    fn forward(tape: &mut Tape<f32>, vars: &[(Var, Var)], x: Var) -> Result<Var, TensorError> {
        let mut h = x;
        for &(w, b) in &vars[..3] {
            h = tape.conv2d(h, w, b, 2)?;
            h = tape.relu(h)?;
        }
        for (k, &(w, b)) in vars[3..].iter().enumerate() {
            h = tape.upsample2x(h)?;
            h = tape.conv2d(h, w, b, 1)?;
            if k < 2 {
                h = tape.relu(h)?;
            }
        }
        tape.add(x, h)
    }
}

/// Image-to-image denoiser applied frame by frame.
#[derive(Clone, Debug, PartialEq)]
pub enum DenoiserParams {
    Identity,
    Conv(ConvDenoiser),
}

fn to_chw(img: &Image) -> Tensor<f32> {
    let (w, h) = (img.width, img.height);
    Tensor::from_fn(&[3, h, w], |i| {
        let (c, p) = (i / (w * h), i % (w * h));
        img.data[p * 3 + c]
    })
}

fn from_chw(t: &Tensor<f32>, w: usize, h: usize) -> Image {
    let d = t.data();
    Image {
        width: w,
        height: h,
        data: (0..w * h * 3)
            .map(|i| d[(i % 3) * w * h + i / 3].clamp(0.0, 1.0))
            .collect(),
    }
}

fn check_size(img: &Image, index: usize) -> Result<(), DenoiseError> {
    if img.width == 0 || img.height == 0 || img.width % 8 != 0 || img.height % 8 != 0 {
        return Err(DenoiseError::Shape {
            index,
            reason: format!("{}x{} is not a positive multiple of 8", img.width, img.height),
        });
    }
    Ok(())
}

impl DenoiserParams {
    /// Denoised copy of `img`, clamped to `[0, 1]`. The convolutional variant
    /// needs width and height divisible by 8.
    pub fn apply(&self, img: &Image) -> Result<Image, DenoiseError> {
        match self {
            DenoiserParams::Identity => Ok(img.clone()),
            DenoiserParams::Conv(net) => {
                check_size(img, 0)?;
                let mut tape = Tape::new();
                let vars = net.place(&mut tape, false);
                let x = tape.constant(to_chw(img));
                let y = ConvDenoiser::forward(&mut tape, &vars, x)?;
                Ok(from_chw(tape.value(y), img.width, img.height))
            }
        }
    }

    pub fn apply_all(&self, images: &[Image]) -> Result<Vec<Image>, DenoiseError> {
        images.par_iter().map(|i| self.apply(i)).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenoiserTrainConfig {
    pub steps: usize,
    pub lr: f64,
    /// Image pairs per step; all of them when the set is smaller.
    pub batch: usize,
    pub seed: u64,
    pub log_every: usize,
}

impl Default for DenoiserTrainConfig {
    fn default() -> Self {
        Self {
            steps: 600,
            lr: 1e-3,
            batch: 8,
            seed: 0,
            log_every: 100,
        }
    }
}

/// Fits a convolutional denoiser mapping each rendered image to its ground truth.
pub fn train_denoiser(
    pairs: &[(Image, Image)],
    cfg: &DenoiserTrainConfig,
    log: &mut dyn FnMut(&StepLog),
) -> Result<DenoiserParams, DenoiseError> {
    if pairs.is_empty() {
        return Err(DenoiseError::EmptySet);
    }
    if cfg.batch == 0 || !(cfg.lr > 0.0) {
        return Err(DenoiseError::Config("batch and lr must be positive".into()));
    }
    for (i, (a, b)) in pairs.iter().enumerate() {
        check_size(a, i)?;
        if !a.same_shape(b) {
            return Err(DenoiseError::Shape {
                index: i,
                reason: format!("{}x{} vs {}x{}", a.width, a.height, b.width, b.height),
            });
        }
    }
    let mut net = ConvDenoiser::init(seed::substream(cfg.seed, "denoiser-init"));
    let adam = AdamConfig {
        lr: cfg.lr,
        ..AdamConfig::default()
    };
    let mut states: Vec<[AdamState; 2]> = net
        .convs
        .iter()
        .map(|c| [AdamState::new(c.weight.len(), adam), AdamState::new(c.bias.len(), adam)])
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed::substream(cfg.seed, "denoiser-data"));
    for step in 0..cfg.steps {
        let batch: Vec<usize> = if cfg.batch >= pairs.len() {
            (0..pairs.len()).collect()
        } else {
            rand::seq::index::sample(&mut rng, pairs.len(), cfg.batch).into_vec()
        };
        let scale = 1.0 / batch.len() as f32;
        let per_image: Vec<(f64, Vec<Tensor<f32>>)> = batch
            .par_iter()
            .map(|&i| {
                let (noisy, clean) = &pairs[i];
                let mut tape = Tape::new();
                let vars = net.place(&mut tape, true);
                let x = tape.constant(to_chw(noisy));
                let y = ConvDenoiser::forward(&mut tape, &vars, x)?;
                let loss = tape.mse(y, &to_chw(clean))?;
                let loss = tape.scale(loss, scale)?;
                let value = tape.value(loss).item() as f64;
                let mut g = tape.backward(loss)?;
                let grads = vars
                    .iter()
                    .zip(&net.convs)
                    .flat_map(|(&(w, b), c)| [g.take_or_zeros(w, c.weight.shape()), g.take_or_zeros(b, c.bias.shape())])
                    .collect();
                Ok((value, grads))
            })
            .collect::<Result<_, DenoiseError>>()?;
        let mut iter = per_image.into_iter();
        let (mut loss, mut grads) = iter.next().expect("batch is non-empty");
        for (l, g) in iter {
            loss += l;
            for (a, b) in grads.iter_mut().zip(&g) {
                a.add_assign(b)?;
            }
        }
        if !loss.is_finite() {
            return Err(TrainError::NonFinite {
                step,
                detail: format!("denoiser loss {loss}"),
            }
            .into());
        }
        for ((conv, st), g) in net.convs.iter_mut().zip(&mut states).zip(grads.chunks(2)) {
            st[0].step(&mut conv.weight, &g[0])?;
            st[1].step(&mut conv.bias, &g[1])?;
        }
        if cfg.log_every > 0 && (step % cfg.log_every == 0 || step + 1 == cfg.steps) {
            log(&StepLog {
                step,
                loss,
                psnr: mse_to_psnr(loss),
                lr: cfg.lr,
            });
        }
    }
    Ok(DenoiserParams::Conv(net))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenoiseConfig {
    pub poses: Vec<Pose>,
    pub finetune_steps: usize,
    pub finetune_lr: f64,
    pub rays_per_batch: usize,
    pub chunk_rays: usize,
    pub render: RenderConfig,
    pub seed: u64,
    pub log_every: usize,
}

/// 24 azimuths at 15° and 45° elevation.
pub fn default_poses(radius: f64) -> Vec<Pose> {
    orbit_ring(24, &[15.0, 45.0], radius, 7.5)
}

impl Default for DenoiseConfig {
    fn default() -> Self {
        Self {
            poses: default_poses(3.2),
            finetune_steps: 500,
            finetune_lr: 1e-4,
            rays_per_batch: 512,
            chunk_rays: 128,
            render: RenderConfig {
                samples_per_ray: 32,
                stratified: true,
                ..RenderConfig::default()
            },
            seed: 0,
            log_every: 100,
        }
    }
}

/// Renders `poses` without jitter.
pub fn render_views(
    params: &NerfParams<f32>,
    cfg: &FieldConfig,
    intrinsics: &CameraIntrinsics,
    poses: &[Pose],
    render: &RenderConfig,
) -> Result<Vec<Image>, DenoiseError> {
    let plain = RenderConfig {
        stratified: false,
        ..render.clone()
    };
    poses
        .iter()
        .map(|p| Ok(render_image(params, cfg, intrinsics, p, &plain)?))
        .collect()
}

/// Adam finetuning of a field's own parameters on posed images.
pub fn finetune(
    params: &NerfParams<f32>,
    cfg: &FieldConfig,
    intrinsics: &CameraIntrinsics,
    views: &[View],
    dcfg: &DenoiseConfig,
    log: &mut dyn FnMut(&StepLog),
) -> Result<NerfParams<f32>, DenoiseError> {
    if dcfg.rays_per_batch == 0 || dcfg.chunk_rays == 0 || !(dcfg.finetune_lr > 0.0) {
        return Err(DenoiseError::Config("invalid finetune settings".into()));
    }
    let pool = RayPool::from_views(intrinsics, views)?;
    if pool.is_empty() {
        return Err(TrainError::NoViews.into());
    }
    let mut out = params.clone();
    let adam = AdamConfig {
        lr: dcfg.finetune_lr,
        ..AdamConfig::default()
    };
    let mut states: Vec<AdamState> = out.tensors().iter().map(|t| AdamState::new(t.len(), adam)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed::substream(dcfg.seed, "finetune-data"));
    let sampling = seed::substream(dcfg.seed, "finetune-sampling");
    for step in 0..dcfg.finetune_steps {
        let render = RenderConfig {
            seed: seed::indexed(sampling, step as u64),
            ..dcfg.render.clone()
        };
        let (rays, targets) = pool.sample(&mut rng, dcfg.rays_per_batch);
        let (loss, grads) =
            field_gradients(cfg, &out, &rays, &targets, &render, LossNorm::Squared, dcfg.chunk_rays, 1.0)?;
        if !loss.is_finite() {
            return Err(TrainError::NonFinite {
                step,
                detail: format!("finetune loss {loss}"),
            }
            .into());
        }
        if loss > 0.0 {
            for ((t, g), st) in out.tensors_mut().into_iter().zip(&grads).zip(&mut states) {
                st.step(t, g)?;
            }
        }
        if dcfg.log_every > 0 && (step % dcfg.log_every == 0 || step + 1 == dcfg.finetune_steps) {
            log(&StepLog {
                step,
                loss,
                psnr: mse_to_psnr(loss),
                lr: dcfg.finetune_lr,
            });
        }
    }
    Ok(out)
}

/// Renders the configured poses, denoises every frame and finetunes the
/// field on the denoised set. Returns the refined field and the denoised
/// views it was fitted to.
pub fn denoise_and_finetune(
    params: &NerfParams<f32>,
    cfg: &FieldConfig,
    intrinsics: &CameraIntrinsics,
    denoiser: &DenoiserParams,
    dcfg: &DenoiseConfig,
    log: &mut dyn FnMut(&StepLog),
) -> Result<(NerfParams<f32>, Vec<View>), DenoiseError> {
    if dcfg.poses.is_empty() {
        return Err(DenoiseError::Config("at least one pose is required".into()));
    }
    params.check(cfg)?;
    let rendered = render_views(params, cfg, intrinsics, &dcfg.poses, &dcfg.render)?;
    let cleaned = denoiser.apply_all(&rendered)?;
    let views: Vec<View> = dcfg
        .poses
        .iter()
        .zip(cleaned)
        .enumerate()
        .map(|(k, (pose, image))| View {
            pose: *pose,
            image,
            file: format!("{k:03}.png"),
        })
        .collect();
    let refined = finetune(params, cfg, intrinsics, &views, dcfg, log)?;
    Ok((refined, views))
}

/// Writes images as `000.png`, `001.png`, ... for an external denoiser.
pub fn write_frames(dir: &Path, images: &[Image]) -> Result<(), DenoiseError> {
    std::fs::create_dir_all(dir).map_err(|e| SceneError::Io {
        path: dir.to_path_buf(),
        reason: e.to_string(),
    })?;
    for (k, img) in images.iter().enumerate() {
        img.write_png(&dir.join(format!("{k:03}.png")))?;
    }
    Ok(())
}

/// Reads `count` numbered frames back. Frames written by [`write_frames`]
/// come back quantized to 8 bits.
pub fn read_frames(dir: &Path, count: usize) -> Result<Vec<Image>, DenoiseError> {
    (0..count)
        .map(|k| Ok(Image::read_png(&dir.join(format!("{k:03}.png")))?))
        .collect()
}

impl Persist for DenoiserParams {
    fn to_checkpoint(&self) -> Checkpoint {
        let mut ckpt = Checkpoint::new(ModelKind::Denoiser);
        match self {
            DenoiserParams::Identity => ckpt.put_json("variant", &"identity"),
            DenoiserParams::Conv(net) => {
                ckpt.put_json("variant", &"conv");
                for (k, c) in net.convs.iter().enumerate() {
                    ckpt.put_tensor(format!("conv{k}.weight"), &c.weight);
                    ckpt.put_tensor(format!("conv{k}.bias"), &c.bias);
                }
            }
        }
        ckpt
    }

    fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self, CheckpointError> {
        ckpt.expect_kind(ModelKind::Denoiser)?;
        let variant: String = ckpt.json("variant")?;
        match variant.as_str() {
            "identity" => Ok(DenoiserParams::Identity),
            "conv" => {
                let mut net = ConvDenoiser::init(0);
                for (k, c) in net.convs.iter_mut().enumerate() {
                    for (name, slot) in [("weight", &mut c.weight), ("bias", &mut c.bias)] {
                        let key = format!("conv{k}.{name}");
                        let t = ckpt.tensor(&key)?;
                        if t.shape() != slot.shape() {
                            return Err(CheckpointError::Malformed {
                                name: key,
                                reason: format!("shape {:?}, expected {:?}", t.shape(), slot.shape()),
                            });
                        }
                        *slot = t;
                    }
                }
                Ok(DenoiserParams::Conv(net))
            }
            other => Err(CheckpointError::Malformed {
                name: "variant".into(),
                reason: format!("unknown denoiser '{other}'"),
            }),
        }
    }
}
