use serde::{Deserialize, Serialize};

use super::{Real, Result, Tensor, TensorError};

/// Adam hyper-parameters. Defaults: lr 1e-3, β1 0.9, β2 0.99.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.99,
            eps: 1e-8,
        }
    }
}

/// Moment buffers for one parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<f32>,
    pub v: Vec<f32>,
    pub t: u64,
    pub config: AdamConfig,
}

impl AdamState {
    pub fn new(len: usize, config: AdamConfig) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
            config,
        }
    }

    /// One bias-corrected Adam update of `params` in place.
    pub fn step<S: Real>(&mut self, params: &mut Tensor<S>, grads: &Tensor<S>) -> Result<()> {
        if params.shape() != grads.shape() || self.m.len() != params.len() {
            return Err(TensorError::ShapeMismatch {
                op: "adam_step",
                expected: params.shape().to_vec(),
                got: grads.shape().to_vec(),
            });
        }
        self.t += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let t = self.t as i32;
        let step = S::lit(lr / (1.0 - beta1.powi(t)));
        let v_corr = S::lit(1.0 / (1.0 - beta2.powi(t)));
        let (b1, b2, eps) = (S::lit(beta1), S::lit(beta2), S::lit(eps));
        let one = S::one();
        let g = grads.data();
        let p = params.data_mut();
        for i in 0..p.len() {
            let gi = g[i];
            let m = b1 * S::lit(self.m[i] as f64) + (one - b1) * gi;
            let v = b2 * S::lit(self.v[i] as f64) + (one - b2) * gi * gi;
            self.m[i] = m.f64() as f32;
            self.v[i] = v.f64() as f32;
            p[i] -= step * m / ((v * v_corr).sqrt() + eps);
        }
        Ok(())
    }
}
