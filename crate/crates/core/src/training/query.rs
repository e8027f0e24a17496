use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{StepLog, TrainError};
use crate::field::Layer;
use crate::hypernet::{Codebook, InstanceCodes};
use crate::scene::{Checkpoint, CheckpointError, Image, ModelKind, Persist, SceneDataset};
use crate::seed;
use crate::tensor::{AdamConfig, AdamState, Tape, Tensor, Var};

/// Maps an image to a fixed-length vector. `key` identifies the image (e.g.
/// its manifest path) for embedders backed by precomputed features.
pub trait Embedder: Sync {
    fn dim(&self) -> usize;
    fn embed(&self, image: &Image, key: Option<&str>) -> Result<Vec<f32>, TrainError>;
}

/// Grayscale image bilinearly resampled to `side × side`, mean-centered and
/// scaled to unit length. Constant images map to the zero vector.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TrivialEmbedding {
    pub side: usize,
}

impl Default for TrivialEmbedding {
    fn default() -> Self {
        Self { side: 32 }
    }
}

impl Embedder for TrivialEmbedding {
    fn dim(&self) -> usize {
        self.side * self.side
    }

    fn embed(&self, image: &Image, _key: Option<&str>) -> Result<Vec<f32>, TrainError> {
        if image.width == 0 || image.height == 0 {
            return Err(TrainError::Embedding("empty image".into()));
        }
        let gray = image.grayscale();
        let (w, h) = (image.width, image.height);
        let at = |x: usize, y: usize| gray[y * w + x] as f64;
        let mut out = Vec::with_capacity(self.dim());
        for j in 0..self.side {
            for i in 0..self.side {
                let x = ((i as f64 + 0.5) * w as f64 / self.side as f64 - 0.5).clamp(0.0, (w - 1) as f64);
                let y = ((j as f64 + 0.5) * h as f64 / self.side as f64 - 0.5).clamp(0.0, (h - 1) as f64);
                let (x0, y0) = (x.floor() as usize, y.floor() as usize);
                let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
                let (fx, fy) = (x - x0 as f64, y - y0 as f64);
                let top = at(x0, y0) * (1.0 - fx) + at(x1, y0) * fx;
                let bottom = at(x0, y1) * (1.0 - fx) + at(x1, y1) * fx;
                out.push(top * (1.0 - fy) + bottom * fy);
            }
        }
        let mean = out.iter().sum::<f64>() / out.len() as f64;
        out.iter_mut().for_each(|v| *v -= mean);
        let norm = out.iter().map(|v| v * v).sum::<f64>().sqrt();
        Ok(out
            .into_iter()
            .map(|v| if norm > 1e-12 { (v / norm) as f32 } else { 0.0 })
            .collect())
    }
}

/// Precomputed embeddings keyed by image path, e.g. features from an
/// external image or text encoder.
#[derive(Clone, Debug, PartialEq)]
pub struct FileEmbedding {
    dim: usize,
    table: BTreeMap<String, Vec<f32>>,
}

impl FileEmbedding {
    pub fn new(table: BTreeMap<String, Vec<f32>>) -> Result<Self, TrainError> {
        let dim = table
            .values()
            .next()
            .map(Vec::len)
            .ok_or_else(|| TrainError::Embedding("no embeddings".into()))?;
        if let Some((k, v)) = table.iter().find(|(_, v)| v.len() != dim) {
            return Err(TrainError::Embedding(format!(
                "'{k}' has length {}, expected {dim}",
                v.len()
            )));
        }
        Ok(Self { dim, table })
    }

    /// Reads a JSON object `{"<key>": [floats], ...}`.
    pub fn from_json(path: &Path) -> Result<Self, TrainError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| TrainError::Embedding(format!("{}: {e}", path.display())))?;
        let table = serde_json::from_str(&text)
            .map_err(|e| TrainError::Embedding(format!("{}: {e}", path.display())))?;
        Self::new(table)
    }
}

impl Embedder for FileEmbedding {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, _image: &Image, key: Option<&str>) -> Result<Vec<f32>, TrainError> {
        let key = key.ok_or_else(|| TrainError::Embedding("image has no key".into()))?;
        self.table
            .get(key)
            .cloned()
            .ok_or_else(|| TrainError::Embedding(format!("no embedding for '{key}'")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueryConfig {
    pub steps: usize,
    pub lr: f64,
    /// Examples per step; the full set when it is smaller.
    pub batch: usize,
    pub hidden: usize,
    pub seed: u64,
    pub log_every: usize,
}

impl Default for QueryConfig {
    fn default() -> Self {
        Self {
            steps: 1500,
            lr: 1e-3,
            batch: 64,
            hidden: 512,
            seed: 0,
            log_every: 100,
        }
    }
}

/// MLP from an embedding to concatenated shape and color codes.
#[derive(Clone, Debug, PartialEq)]
pub struct QueryNetParams {
    pub embed_dim: usize,
    pub shape_dim: usize,
    pub color_dim: usize,
    pub layers: Vec<Layer<f32>>,
}

#[derive(Serialize, Deserialize)]
struct QueryMeta {
    embed_dim: usize,
    shape_dim: usize,
    color_dim: usize,
    hidden: usize,
}

impl QueryNetParams {
    pub fn init(embed_dim: usize, shape_dim: usize, color_dim: usize, hidden: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dims = [embed_dim, hidden, hidden, shape_dim + color_dim];
        let layers = dims
            .windows(2)
            .map(|d| {
                let normal = Normal::new(0.0, (2.0 / d[0] as f64).sqrt()).expect("positive std");
                Layer {
                    weight: Tensor::from_fn(&[d[0], d[1]], |_| normal.sample(&mut rng) as f32),
                    bias: Tensor::zeros(&[d[1]]),
                }
            })
            .collect();
        Self {
            embed_dim,
            shape_dim,
            color_dim,
            layers,
        }
    }

    pub fn hidden(&self) -> usize {
        self.layers[0].weight.shape()[1]
    }

    fn place(&self, tape: &mut Tape<f32>, trainable: bool) -> Vec<(Var, Var)> {
        self.layers
            .iter()
            .map(|l| {
                if trainable {
                    (tape.leaf(l.weight.clone()), tape.leaf(l.bias.clone()))
                } else {
                    (tape.constant(l.weight.clone()), tape.constant(l.bias.clone()))
                }
            })
            .collect()
    }

    fn forward(tape: &mut Tape<f32>, vars: &[(Var, Var)], x: Var) -> Result<Var, TrainError> {
        let mut h = x;
        for (k, &(w, b)) in vars.iter().enumerate() {
            h = tape.affine(h, w, b)?;
            if k + 1 < vars.len() {
                h = tape.relu(h)?;
            }
        }
        Ok(h)
    }

    fn check(&self, embedding: &[f32]) -> Result<(), TrainError> {
        if embedding.len() != self.embed_dim {
            return Err(TrainError::Embedding(format!(
                "embedding has length {}, network expects {}",
                embedding.len(),
                self.embed_dim
            )));
        }
        Ok(())
    }

    /// Predicted codes for each embedding.
    pub fn predict_batch(&self, embeddings: &[Vec<f32>]) -> Result<Vec<InstanceCodes>, TrainError> {
        if embeddings.is_empty() {
            return Ok(Vec::new());
        }
        for e in embeddings {
            self.check(e)?;
        }
        let mut tape = Tape::new();
        let vars = self.place(&mut tape, false);
        let x = tape.constant(stack(embeddings, self.embed_dim));
        let y = Self::forward(&mut tape, &vars, x)?;
        let out = tape.value(y);
        Ok((0..embeddings.len())
            .map(|r| InstanceCodes::split(out.row(r), self.shape_dim))
            .collect())
    }

    pub fn predict(&self, embedding: &[f32]) -> Result<InstanceCodes, TrainError> {
        Ok(self.predict_batch(&[embedding.to_vec()])?.remove(0))
    }

    /// Mean squared error between predicted and target codes.
    pub fn loss(&self, embeddings: &[Vec<f32>], targets: &[InstanceCodes]) -> Result<f64, TrainError> {
        if embeddings.len() != targets.len() || embeddings.is_empty() {
            return Err(TrainError::Config("embedding and target counts differ".into()));
        }
        let pred = self.predict_batch(embeddings)?;
        let (mut sum, mut n) = (0.0, 0usize);
        for (p, t) in pred.iter().zip(targets) {
            for (a, b) in p.concat().iter().zip(t.concat()) {
                sum += ((a - b) as f64).powi(2);
                n += 1;
            }
        }
        Ok(sum / n as f64)
    }
}

fn stack(rows: &[Vec<f32>], width: usize) -> Tensor<f32> {
    Tensor::new(vec![rows.len(), width], rows.iter().flatten().copied().collect()).expect("rows checked")
}

/// Embeddings of every training view and the codebook index of its
/// instance. Views are keyed as `<instance id>/<image path>`.
pub fn view_embeddings(
    codebook: &Codebook,
    dataset: &SceneDataset,
    embedder: &dyn Embedder,
) -> Result<(Vec<Vec<f32>>, Vec<usize>), TrainError> {
    let pairs: Vec<(usize, usize)> = dataset
        .instances
        .iter()
        .enumerate()
        .flat_map(|(n, inst)| (0..inst.views.len()).map(move |k| (n, k)))
        .collect();
    let embeddings = pairs
        .par_iter()
        .map(|&(n, k)| {
            let inst = &dataset.instances[n];
            let key = format!("{}/{}", inst.id, inst.views[k].file);
            let e = embedder.embed(&inst.views[k].image, Some(&key))?;
            if e.len() != embedder.dim() {
                return Err(TrainError::Embedding(format!(
                    "embedder returned {} values, declared {}",
                    e.len(),
                    embedder.dim()
                )));
            }
            Ok(e)
        })
        .collect::<Result<Vec<_>, TrainError>>()?;
    let owners = pairs
        .iter()
        .map(|&(n, _)| codebook.index_of(&dataset.instances[n].id))
        .collect::<Result<Vec<_>, _>>()?;
    Ok((embeddings, owners))
}

/// Fits the query network to map view embeddings onto their instance codes.
pub fn train_query_net(
    codebook: &Codebook,
    dataset: &SceneDataset,
    embedder: &dyn Embedder,
    cfg: &QueryConfig,
    log: &mut dyn FnMut(&StepLog),
) -> Result<QueryNetParams, TrainError> {
    if cfg.batch == 0 || cfg.hidden == 0 || !(cfg.lr > 0.0) {
        return Err(TrainError::Config("invalid query network settings".into()));
    }
    let (embeddings, owners) = view_embeddings(codebook, dataset, embedder)?;
    if embeddings.is_empty() {
        return Err(TrainError::NoViews);
    }
    let first = codebook.get(0);
    let (shape_dim, color_dim) = (first.shape.len(), first.color.len());
    let mut net = QueryNetParams::init(
        embedder.dim(),
        shape_dim,
        color_dim,
        cfg.hidden,
        seed::substream(cfg.seed, "query-init"),
    );
    let targets: Vec<Vec<f32>> = owners.iter().map(|&n| codebook.get(n).concat()).collect();
    let adam = AdamConfig {
        lr: cfg.lr,
        ..AdamConfig::default()
    };
    let mut states: Vec<[AdamState; 2]> = net
        .layers
        .iter()
        .map(|l| [AdamState::new(l.weight.len(), adam), AdamState::new(l.bias.len(), adam)])
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed::substream(cfg.seed, "query-data"));
    let count = embeddings.len();

    for step in 0..cfg.steps {
        let batch: Vec<usize> = if cfg.batch >= count {
            (0..count).collect()
        } else {
            rand::seq::index::sample(&mut rng, count, cfg.batch).into_vec()
        };
        let x: Vec<Vec<f32>> = batch.iter().map(|&i| embeddings[i].clone()).collect();
        let y: Vec<Vec<f32>> = batch.iter().map(|&i| targets[i].clone()).collect();
        let mut tape = Tape::new();
        let vars = net.place(&mut tape, true);
        let input = tape.constant(stack(&x, net.embed_dim));
        let out = QueryNetParams::forward(&mut tape, &vars, input)?;
        let loss = tape.mse(out, &stack(&y, shape_dim + color_dim))?;
        let value = tape.value(loss).item() as f64;
        if !value.is_finite() {
            return Err(TrainError::NonFinite {
                step,
                detail: format!("query loss {value}"),
            });
        }
        let mut grads = tape.backward(loss)?;
        for ((layer, &(w, b)), st) in net.layers.iter_mut().zip(&vars).zip(&mut states) {
            let gw = grads.take_or_zeros(w, layer.weight.shape());
            let gb = grads.take_or_zeros(b, layer.bias.shape());
            st[0].step(&mut layer.weight, &gw)?;
            st[1].step(&mut layer.bias, &gb)?;
        }
        if cfg.log_every > 0 && (step % cfg.log_every == 0 || step + 1 == cfg.steps) {
            log(&StepLog {
                step,
                loss: value,
                psnr: f64::NAN,
                lr: cfg.lr,
            });
        }
    }
    Ok(net)
}

#[derive(Clone, Debug, PartialEq)]
pub struct QueryResult {
    pub codes: InstanceCodes,
    /// Codebook index of the nearest entry (ties go to the lowest index).
    pub nearest: usize,
    pub id: String,
}

/// Predicted codes for an embedding and the closest codebook entry.
pub fn query(net: &QueryNetParams, codebook: &Codebook, embedding: &[f32]) -> Result<QueryResult, TrainError> {
    let codes = net.predict(embedding)?;
    let nearest = codebook.nearest(&codes)?;
    Ok(QueryResult {
        codes,
        nearest,
        id: codebook.ids()[nearest].clone(),
    })
}

impl Persist for QueryNetParams {
    fn to_checkpoint(&self) -> Checkpoint {
        let mut ckpt = Checkpoint::new(ModelKind::QueryNet);
        ckpt.put_json(
            "meta",
            &QueryMeta {
                embed_dim: self.embed_dim,
                shape_dim: self.shape_dim,
                color_dim: self.color_dim,
                hidden: self.hidden(),
            },
        );
        for (k, l) in self.layers.iter().enumerate() {
            ckpt.put_tensor(format!("layer{k}.weight"), &l.weight);
            ckpt.put_tensor(format!("layer{k}.bias"), &l.bias);
        }
        ckpt
    }

    fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self, CheckpointError> {
        ckpt.expect_kind(ModelKind::QueryNet)?;
        let meta: QueryMeta = ckpt.json("meta")?;
        let mut net = QueryNetParams::init(meta.embed_dim, meta.shape_dim, meta.color_dim, meta.hidden, 0);
        for (k, l) in net.layers.iter_mut().enumerate() {
            for (name, slot) in [("weight", &mut l.weight), ("bias", &mut l.bias)] {
                let key = format!("layer{k}.{name}");
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
        Ok(net)
    }
}

#[cfg(test)]
mod tests {
    use super::super::tests::{tiny_config, tiny_dataset};
    use super::*;

    #[test]
    fn trivial_embedding_properties() {
        let e = TrivialEmbedding::default();
        let flat = e.embed(&Image::filled(10, 7, [0.3, 0.3, 0.3]), None).unwrap();
        assert_eq!(flat.len(), 1024);
        assert!(flat.iter().all(|&v| v == 0.0));
        let mut img = Image::filled(48, 48, [1.0; 3]);
        for v in 0..24 {
            for u in 0..48 {
                img.set_pixel(u, v, [0.0; 3]);
            }
        }
        let a = e.embed(&img, None).unwrap();
        let norm: f32 = a.iter().map(|v| v * v).sum::<f32>().sqrt();
        assert!((norm - 1.0).abs() < 1e-5);
        assert!(a.iter().sum::<f32>().abs() < 1e-4);
        assert!(a[0] < 0.0 && a[1023] > 0.0);
        assert_eq!(a, e.embed(&img, None).unwrap());
    }

    #[test]
    fn file_embedding_lookup() {
        let mut t = BTreeMap::new();
        t.insert("a.png".to_string(), vec![1.0, 2.0]);
        t.insert("b.png".to_string(), vec![3.0, 4.0]);
        let e = FileEmbedding::new(t.clone()).unwrap();
        let img = Image::filled(1, 1, [0.0; 3]);
        assert_eq!(e.embed(&img, Some("b.png")).unwrap(), vec![3.0, 4.0]);
        assert!(e.embed(&img, Some("c.png")).is_err());
        assert!(e.embed(&img, None).is_err());
        t.insert("c.png".to_string(), vec![1.0]);
        assert!(FileEmbedding::new(t).is_err());
    }

    #[test]
    fn single_instance_converges_to_its_codes() {
        let ds = tiny_dataset(1);
        let book = Codebook::random(&[ds.instances[0].id.clone()], &tiny_config(), 0.5, 2).unwrap();
        let cfg = QueryConfig {
            steps: 300,
            hidden: 32,
            ..QueryConfig::default()
        };
        let net = train_query_net(&book, &ds, &TrivialEmbedding::default(), &cfg, &mut |_| {}).unwrap();
        let (emb, _) = view_embeddings(&book, &ds, &TrivialEmbedding::default()).unwrap();
        for e in &emb {
            let r = query(&net, &book, e).unwrap();
            assert_eq!(r.nearest, 0);
            let err: f32 = r
                .codes
                .concat()
                .iter()
                .zip(book.get(0).concat())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f32::max);
            assert!(err < 0.05, "max code error {err}");
        }
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let net = QueryNetParams::init(4, 2, 2, 8, 0);
        assert!(matches!(net.predict(&[0.0; 3]), Err(TrainError::Embedding(_))));
        assert_eq!(net.predict(&[0.0; 4]).unwrap().shape.len(), 2);
    }

    #[test]
    fn checkpoint_round_trip() {
        let net = QueryNetParams::init(6, 2, 3, 5, 11);
        let back = QueryNetParams::from_checkpoint(&Checkpoint::from_bytes(&net.to_checkpoint().to_bytes()).unwrap())
            .unwrap();
        assert_eq!(net, back);
    }
}
