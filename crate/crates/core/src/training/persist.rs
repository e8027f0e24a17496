use serde::{Deserialize, Serialize};

use super::PriorModel;
use crate::field::{FieldConfig, Layer, NerfParams};
use crate::hypernet::{Codebook, HyperHead, HypernetConfig, HypernetParams, InstanceCodes};
use crate::scene::{Checkpoint, CheckpointError, ModelKind, Persist};
use crate::tensor::Tensor;

/// A single instance field with its configuration, e.g. after finetuning.
#[derive(Clone, Debug, PartialEq)]
pub struct FieldModel {
    pub config: FieldConfig,
    pub params: NerfParams<f32>,
}

#[derive(Serialize, Deserialize)]
struct PriorMeta {
    config: HypernetConfig,
    seed: u64,
    ids: Vec<String>,
}

fn read_into(ckpt: &Checkpoint, name: &str, slot: &mut Tensor<f32>) -> Result<(), CheckpointError> {
    let t = ckpt.tensor(name)?;
    if t.shape() != slot.shape() {
        return Err(CheckpointError::Malformed {
            name: name.into(),
            reason: format!("shape {:?}, expected {:?}", t.shape(), slot.shape()),
        });
    }
    *slot = t;
    Ok(())
}

fn zero_layers(dims: &[usize]) -> Vec<Layer<f32>> {
    dims.windows(2)
        .map(|d| Layer {
            weight: Tensor::zeros(&[d[0], d[1]]),
            bias: Tensor::zeros(&[d[1]]),
        })
        .collect()
}

impl Persist for PriorModel {
    fn to_checkpoint(&self) -> Checkpoint {
        let mut ckpt = Checkpoint::new(ModelKind::Prior);
        ckpt.put_json(
            "meta",
            &PriorMeta {
                config: self.config().clone(),
                seed: self.seed,
                ids: self.codebook.ids().to_vec(),
            },
        );
        for (h, head) in self.hypernet.heads.iter().enumerate() {
            for (k, l) in head.layers.iter().enumerate() {
                ckpt.put_tensor(format!("head{h}.layer{k}.weight"), &l.weight);
                ckpt.put_tensor(format!("head{h}.layer{k}.bias"), &l.bias);
            }
        }
        let stack = |f: fn(&InstanceCodes) -> &Vec<f32>, dim: usize| {
            let data: Vec<f32> = self.codebook.codes().iter().flat_map(|c| f(c).iter().copied()).collect();
            Tensor::new(vec![self.codebook.len(), dim], data).expect("codebook dims are checked on insert")
        };
        ckpt.put_tensor("codes.shape", &stack(|c| &c.shape, self.config().shape_dim));
        ckpt.put_tensor("codes.color", &stack(|c| &c.color, self.config().color_dim));
        ckpt
    }

    fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self, CheckpointError> {
        ckpt.expect_kind(ModelKind::Prior)?;
        let meta: PriorMeta = ckpt.json("meta")?;
        let cfg = meta.config;
        cfg.field.validate().map_err(|e| CheckpointError::Malformed {
            name: "meta".into(),
            reason: e.to_string(),
        })?;
        let mut heads = Vec::new();
        for (h, (code, target, out)) in cfg.heads().into_iter().enumerate() {
            let mut layers = zero_layers(&[cfg.code_dim(code), cfg.hidden, cfg.hidden, out]);
            for (k, l) in layers.iter_mut().enumerate() {
                read_into(ckpt, &format!("head{h}.layer{k}.weight"), &mut l.weight)?;
                read_into(ckpt, &format!("head{h}.layer{k}.bias"), &mut l.bias)?;
            }
            heads.push(HyperHead { code, target, layers });
        }
        let n = meta.ids.len();
        let mut shape = Tensor::zeros(&[n, cfg.shape_dim]);
        let mut color = Tensor::zeros(&[n, cfg.color_dim]);
        read_into(ckpt, "codes.shape", &mut shape)?;
        read_into(ckpt, "codes.color", &mut color)?;
        let mut codebook = Codebook::default();
        for (i, id) in meta.ids.into_iter().enumerate() {
            let codes = InstanceCodes {
                shape: shape.row(i).to_vec(),
                color: color.row(i).to_vec(),
            };
            codebook.insert(id, codes).map_err(|e| CheckpointError::Malformed {
                name: "meta".into(),
                reason: e.to_string(),
            })?;
        }
        Ok(PriorModel {
            hypernet: HypernetParams { config: cfg, heads },
            codebook,
            seed: meta.seed,
        })
    }
}

impl Persist for FieldModel {
    fn to_checkpoint(&self) -> Checkpoint {
        let mut ckpt = Checkpoint::new(ModelKind::Field);
        ckpt.put_json("config", &self.config);
        if let Some(t) = &self.params.tables {
            ckpt.put_tensor("tables", t);
        }
        for (k, l) in self.params.layers.iter().enumerate() {
            ckpt.put_tensor(format!("layer{k}.weight"), &l.weight);
            ckpt.put_tensor(format!("layer{k}.bias"), &l.bias);
        }
        ckpt
    }

    fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self, CheckpointError> {
        ckpt.expect_kind(ModelKind::Field)?;
        let config: FieldConfig = ckpt.json("config")?;
        config.validate().map_err(|e| CheckpointError::Malformed {
            name: "config".into(),
            reason: e.to_string(),
        })?;
        let mut params = NerfParams::zeros(&config);
        if let Some(t) = params.tables.as_mut() {
            read_into(ckpt, "tables", t)?;
        }
        for (k, l) in params.layers.iter_mut().enumerate() {
            read_into(ckpt, &format!("layer{k}.weight"), &mut l.weight)?;
            read_into(ckpt, &format!("layer{k}.bias"), &mut l.bias)?;
        }
        Ok(Self { config, params })
    }
}
