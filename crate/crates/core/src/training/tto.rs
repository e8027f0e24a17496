use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{field_gradients, mse_to_psnr, numeric, LossNorm, PriorModel, RayPool, StepLog, TrainError};
use crate::field::RenderConfig;
use crate::hypernet::{code_tensor, field_values, predict_on_tape, InstanceCodes};
use crate::scene::{CameraIntrinsics, View};
use crate::seed;
use crate::tensor::{AdamConfig, AdamState, Tape};

/// Starting point for test-time optimization.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TtoInit {
    #[default]
    CodebookMean,
    Entry(usize),
    Codes(InstanceCodes),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TtoConfig {
    pub steps: usize,
    /// Rays per step; when at least the number of pixels, every step uses all of them.
    pub rays_per_batch: usize,
    pub lr: f64,
    pub seed: u64,
    pub loss: LossNorm,
    pub render: RenderConfig,
    pub chunk_rays: usize,
    pub init: TtoInit,
    pub log_every: usize,
}

impl Default for TtoConfig {
    fn default() -> Self {
        Self {
            steps: 300,
            rays_per_batch: 1024,
            lr: 1e-2,
            seed: 0,
            loss: LossNorm::Squared,
            render: RenderConfig::default(),
            chunk_rays: 128,
            init: TtoInit::CodebookMean,
            log_every: 50,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TtoResult {
    /// Codes with the lowest observed loss.
    pub codes: InstanceCodes,
    pub best_loss: f64,
    pub best_step: usize,
    /// Loss evaluated before each update.
    pub losses: Vec<f64>,
}

/// Fits fresh codes to posed views of a new instance with the prior frozen.
pub fn test_time_optimize(
    prior: &PriorModel,
    intrinsics: &CameraIntrinsics,
    views: &[View],
    cfg: &TtoConfig,
    log: &mut dyn FnMut(&StepLog),
) -> Result<TtoResult, TrainError> {
    if cfg.rays_per_batch == 0 || cfg.chunk_rays == 0 || !(cfg.lr > 0.0) {
        return Err(TrainError::Config("invalid optimization settings".into()));
    }
    let pool = RayPool::from_views(intrinsics, views)?;
    if pool.is_empty() {
        return Err(TrainError::NoViews);
    }
    let mut codes = match &cfg.init {
        TtoInit::CodebookMean => prior.codebook.mean()?,
        TtoInit::Entry(i) => {
            if *i >= prior.codebook.len() {
                return Err(TrainError::Config(format!("codebook has no entry {i}")));
            }
            prior.codebook.get(*i).clone()
        }
        TtoInit::Codes(c) => c.clone(),
    };
    codes.check(prior.config())?;
    let adam = AdamConfig {
        lr: cfg.lr,
        ..AdamConfig::default()
    };
    let mut states = [
        AdamState::new(codes.shape.len(), adam),
        AdamState::new(codes.color.len(), adam),
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(seed::substream(cfg.seed, "data"));
    let sampling = seed::substream(cfg.seed, "sampling");
    let full = cfg.rays_per_batch >= pool.len();
    let mut result = TtoResult {
        codes: codes.clone(),
        best_loss: f64::INFINITY,
        best_step: 0,
        losses: Vec::with_capacity(cfg.steps + 1),
    };

    // One extra evaluation after the last update so its result is also considered.
    for step in 0..=cfg.steps {
        let render = RenderConfig {
            seed: seed::indexed(sampling, step as u64),
            ..cfg.render.clone()
        };
        let (rays, targets) = if full {
            (pool.rays.clone(), pool.targets.clone())
        } else {
            pool.sample(&mut rng, cfg.rays_per_batch)
        };
        let mut tape = Tape::new();
        let hvars = prior.hypernet.place(&mut tape, false);
        let s = tape.leaf(code_tensor(&codes.shape));
        let c = tape.leaf(code_tensor(&codes.color));
        let field = predict_on_tape(&mut tape, &prior.hypernet, &hvars, s, c)?;
        let params = field_values(&tape, &field);
        let (loss, grads) = field_gradients(
            &prior.config().field,
            &params,
            &rays,
            &targets,
            &render,
            cfg.loss,
            cfg.chunk_rays,
            1.0,
        )
        .map_err(|e| numeric(e, step))?;
        if !loss.is_finite() {
            return Err(TrainError::NonFinite {
                step,
                detail: format!("loss {loss}"),
            });
        }
        result.losses.push(loss);
        if loss < result.best_loss {
            result.best_loss = loss;
            result.best_step = step;
            result.codes = codes.clone();
        }
        if cfg.log_every > 0 && (step % cfg.log_every == 0 || step == cfg.steps) {
            log(&StepLog {
                step,
                loss,
                psnr: if cfg.loss == LossNorm::Squared {
                    mse_to_psnr(loss)
                } else {
                    f64::NAN
                },
                lr: cfg.lr,
            });
        }
        if step == cfg.steps {
            break;
        }
        let mut g = tape.backward_from(field.vars().into_iter().zip(grads).collect())?;
        for (k, (var, code)) in [(s, &mut codes.shape), (c, &mut codes.color)].into_iter().enumerate() {
            let mut t = code_tensor::<f32>(code);
            let grad = g.take_or_zeros(var, t.shape());
            states[k].step(&mut t, &grad)?;
            code.copy_from_slice(t.data());
        }
    }
    Ok(result)
}

#[cfg(test)]
mod tests {
    use super::super::tests::{tiny_config, tiny_dataset};
    use super::*;
    use crate::field::render_image;
    use crate::scene::{orbit_ring, Image};

    fn views_of(prior: &PriorModel, codes: &InstanceCodes, intr: &CameraIntrinsics, render: &RenderConfig) -> Vec<View> {
        let params = prior.params_for(codes).unwrap();
        orbit_ring(3, &[25.0], 3.0, 10.0)
            .into_iter()
            .map(|pose| View {
                image: render_image(&params, &prior.config().field, intr, &pose, render).unwrap(),
                pose,
                file: String::new(),
            })
            .collect()
    }

    #[test]
    fn starting_at_the_answer_stays_there() {
        let ds = tiny_dataset(2);
        let prior = PriorModel::init(&["a".into(), "b".into()], &tiny_config(), 0.5, 3).unwrap();
        let intr = ds.instances[0].intrinsics;
        let cfg = TtoConfig {
            steps: 5,
            init: TtoInit::Entry(1),
            render: RenderConfig {
                samples_per_ray: 8,
                ..RenderConfig::default()
            },
            ..TtoConfig::default()
        };
        let views = views_of(&prior, prior.codebook.get(1), &intr, &cfg.render);
        let before = prior.checksum();
        let out = test_time_optimize(&prior, &intr, &views, &cfg, &mut |_| {}).unwrap();
        assert_eq!(prior.checksum(), before);
        assert_eq!(out.best_step, 0);
        assert_eq!(&out.codes, prior.codebook.get(1));
        assert!(out.best_loss < 1e-10);
    }

    #[test]
    fn optimization_reduces_loss() {
        let ds = tiny_dataset(1);
        let prior = PriorModel::init(&["a".into(), "b".into()], &tiny_config(), 0.5, 9).unwrap();
        let cfg = TtoConfig {
            steps: 20,
            render: RenderConfig {
                samples_per_ray: 8,
                ..RenderConfig::default()
            },
            ..TtoConfig::default()
        };
        let inst = &ds.instances[0];
        let out = test_time_optimize(&prior, &inst.intrinsics, &inst.views, &cfg, &mut |_| {}).unwrap();
        assert_eq!(out.losses.len(), 21);
        assert!(out.best_loss < out.losses[0]);
        assert!(out.best_loss.is_finite());
    }

    #[test]
    fn rejects_mismatched_views() {
        let ds = tiny_dataset(1);
        let prior = PriorModel::init(&["a".into()], &tiny_config(), 0.5, 9).unwrap();
        let mut views = ds.instances[0].views.clone();
        views[0].image = Image::filled(3, 3, [1.0; 3]);
        let r = test_time_optimize(&prior, &ds.instances[0].intrinsics, &views, &TtoConfig::default(), &mut |_| {});
        assert!(matches!(r, Err(TrainError::Config(_))));
        let r = test_time_optimize(&prior, &ds.instances[0].intrinsics, &[], &TtoConfig::default(), &mut |_| {});
        assert!(matches!(r, Err(TrainError::NoViews)));
    }
}
