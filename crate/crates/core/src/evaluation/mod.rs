//! Image and geometry metrics, retrieval accuracy and storage accounting.

mod mesh;

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::field::{render_image, FieldConfig, FieldError, NerfParams, RenderConfig};
use crate::hypernet::{Codebook, HypernetError};
use crate::scene::{CameraIntrinsics, Image, View};
use crate::training::{view_embeddings, Embedder, PriorModel, QueryNetParams, TrainError};

pub use mesh::{chamfer, chamfer_points, extract_mesh, extract_mesh_with, isosurface, lattice, reference_mesh, Mesh};

/// SSIM window side and Gaussian width.
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;
pub const PSNR_CAP: f64 = 100.0;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("image shapes differ: {0}x{1} vs {2}x{3}")]
    ShapeMismatch(usize, usize, usize, usize),
    #[error("image {width}x{height} is smaller than the {window}x{window} SSIM window")]
    TooSmall { width: usize, height: usize, window: usize },
    #[error("mesh is empty")]
    EmptyMesh,
    #[error("invalid mesh: {0}")]
    Mesh(String),
    #[error("lattice resolution must be at least 2, got {0}")]
    Resolution(usize),
    #[error("dataset has no views")]
    EmptyDataset,
    #[error("{0}")]
    Io(String),
    #[error(transparent)]
    Field(#[from] FieldError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Hypernet(#[from] HypernetError),
}

fn check_shapes(a: &Image, b: &Image) -> Result<(), EvalError> {
    if a.same_shape(b) {
        Ok(())
    } else {
        Err(EvalError::ShapeMismatch(a.width, a.height, b.width, b.height))
    }
}

/// Mean squared error over all pixels and channels.
pub fn mse(a: &Image, b: &Image) -> Result<f64, EvalError> {
    check_shapes(a, b)?;
    if a.data.is_empty() {
        return Ok(0.0);
    }
    let sum: f64 = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(x, y)| ((x - y) as f64).powi(2))
        .sum();
    Ok(sum / a.data.len() as f64)
}

/// `10·log10(1/MSE)`, capped at [`PSNR_CAP`].
pub fn psnr(a: &Image, b: &Image) -> Result<f64, EvalError> {
    let m = mse(a, b)?;
    Ok(if m < 1e-10 {
        PSNR_CAP
    } else {
        (-10.0 * m.log10()).min(PSNR_CAP)
    })
}

fn gaussian_window() -> Vec<f64> {
    let half = (SSIM_WINDOW / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-((i as f64 - half).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let total: f64 = g.iter().sum();
    g.into_iter().map(|v| v / total).collect()
}

/// Windowed SSIM on luma with an 11×11 Gaussian window (σ = 1.5), averaged
/// over every window position that fits inside the image.
pub fn ssim(a: &Image, b: &Image) -> Result<f64, EvalError> {
    check_shapes(a, b)?;
    let (w, h) = (a.width, a.height);
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        return Err(EvalError::TooSmall {
            width: w,
            height: h,
            window: SSIM_WINDOW,
        });
    }
    let ga: Vec<f64> = a.grayscale().into_iter().map(f64::from).collect();
    let gb: Vec<f64> = b.grayscale().into_iter().map(f64::from).collect();
    let g = gaussian_window();
    let (ow, oh) = (w - SSIM_WINDOW + 1, h - SSIM_WINDOW + 1);
    let rows: Vec<f64> = (0..oh)
        .into_par_iter()
        .map(|y| {
            let mut acc = 0.0;
            for x in 0..ow {
                let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for (j, gj) in g.iter().enumerate() {
                    for (i, gi) in g.iter().enumerate() {
                        let wgt = gi * gj;
                        let idx = (y + j) * w + x + i;
                        let (p, q) = (ga[idx], gb[idx]);
                        ma += wgt * p;
                        mb += wgt * q;
                        saa += wgt * p * p;
                        sbb += wgt * q * q;
                        sab += wgt * p * q;
                    }
                }
                let (va, vb, cov) = (saa - ma * ma, sbb - mb * mb, sab - ma * mb);
                acc += ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2))
                    / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2));
            }
            acc
        })
        .collect();
    Ok(rows.iter().sum::<f64>() / (ow * oh) as f64)
}

/// Per-view PSNR and SSIM of a field against posed ground-truth views.
pub fn evaluate_views(
    params: &NerfParams<f32>,
    cfg: &FieldConfig,
    intrinsics: &CameraIntrinsics,
    views: &[View],
    render: &RenderConfig,
) -> Result<(Vec<f64>, Vec<f64>), EvalError> {
    let mut psnrs = Vec::with_capacity(views.len());
    let mut ssims = Vec::with_capacity(views.len());
    for v in views {
        let img = render_image(params, cfg, intrinsics, &v.pose, render)?;
        psnrs.push(psnr(&img, &v.image)?);
        ssims.push(ssim(&img, &v.image)?);
    }
    Ok((psnrs, ssims))
}

/// Fraction of (instance, view) pairs whose query lands within the `k`
/// nearest codebook entries of the true instance.
pub fn retrieval_accuracy(
    net: &QueryNetParams,
    codebook: &Codebook,
    dataset: &crate::scene::SceneDataset,
    embedder: &dyn Embedder,
    k: usize,
) -> Result<f64, EvalError> {
    let (embeddings, owners) = view_embeddings(codebook, dataset, embedder)?;
    if embeddings.is_empty() {
        return Err(EvalError::EmptyDataset);
    }
    let predicted = net.predict_batch(&embeddings)?;
    let hits = predicted
        .iter()
        .zip(&owners)
        .map(|(codes, &truth)| Ok(codebook.ranked(codes)?.iter().take(k).any(|&i| i == truth)))
        .collect::<Result<Vec<bool>, EvalError>>()?;
    Ok(hits.iter().filter(|&&h| h).count() as f64 / hits.len() as f64)
}

/// Storage of a prior holding `instances` codes versus one standalone field
/// per instance, all as 32-bit floats.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompressionReport {
    pub instances: usize,
    pub hypernet_params: usize,
    pub code_dim: usize,
    pub baseline_params: usize,
    pub prior_bytes: u64,
    pub baseline_bytes: u64,
    /// Bytes each additional instance adds to the prior.
    pub marginal_bytes: u64,
    /// `prior_bytes / baseline_bytes`; below 1 means the prior is smaller.
    pub ratio: f64,
}

impl CompressionReport {
    pub fn new(hypernet_params: usize, code_dim: usize, baseline_params: usize, instances: usize) -> Self {
        let prior_bytes = 4 * (hypernet_params as u64 + (instances * code_dim) as u64);
        let baseline_bytes = 4 * (instances * baseline_params) as u64;
        Self {
            instances,
            hypernet_params,
            code_dim,
            baseline_params,
            prior_bytes,
            baseline_bytes,
            marginal_bytes: 4 * code_dim as u64,
            ratio: prior_bytes as f64 / baseline_bytes as f64,
        }
    }

    /// Baseline size divided by prior size.
    pub fn gain(&self) -> f64 {
        1.0 / self.ratio
    }
}

/// Storage report for `prior` against `baseline_params` floats per instance
/// (by default the prior's own field size).
pub fn compression_report(prior: &PriorModel, baseline_params: Option<usize>) -> CompressionReport {
    let cfg = prior.config();
    CompressionReport::new(
        prior.hypernet.parameter_count(),
        cfg.shape_dim + cfg.color_dim,
        baseline_params.unwrap_or_else(|| cfg.field.parameter_count()),
        prior.codebook.len().max(1),
    )
}

/// Metrics for one evaluation run.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub view_psnr: Vec<f64>,
    pub view_ssim: Vec<f64>,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
    pub chamfer: Option<f64>,
    /// `(k, accuracy)` pairs.
    pub retrieval: Vec<(usize, f64)>,
    pub compression: Option<CompressionReport>,
}

impl MetricsReport {
    pub fn with_views(view_psnr: Vec<f64>, view_ssim: Vec<f64>) -> Self {
        let mean = |v: &[f64]| {
            if v.is_empty() {
                0.0
            } else {
                v.iter().sum::<f64>() / v.len() as f64
            }
        };
        Self {
            mean_psnr: mean(&view_psnr),
            mean_ssim: mean(&view_ssim),
            view_psnr,
            view_ssim,
            ..Self::default()
        }
    }

    /// Flat `key=value` lines.
    pub fn to_kv(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "mean_psnr={:.6}", self.mean_psnr);
        let _ = writeln!(out, "mean_ssim={:.6}", self.mean_ssim);
        for (i, (p, s)) in self.view_psnr.iter().zip(&self.view_ssim).enumerate() {
            let _ = writeln!(out, "view{i}_psnr={p:.6}");
            let _ = writeln!(out, "view{i}_ssim={s:.6}");
        }
        if let Some(c) = self.chamfer {
            let _ = writeln!(out, "chamfer={c:.8}");
        }
        for (k, acc) in &self.retrieval {
            let _ = writeln!(out, "retrieval_top{k}={acc:.6}");
        }
        if let Some(c) = &self.compression {
            let _ = writeln!(out, "instances={}", c.instances);
            let _ = writeln!(out, "prior_bytes={}", c.prior_bytes);
            let _ = writeln!(out, "baseline_bytes={}", c.baseline_bytes);
            let _ = writeln!(out, "marginal_bytes={}", c.marginal_bytes);
            let _ = writeln!(out, "ratio={:.6}", c.ratio);
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("metrics serialize")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn noisy(w: usize, h: usize, seed: u64) -> Image {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        Image {
            width: w,
            height: h,
            data: (0..w * h * 3).map(|_| rng.random::<f32>()).collect(),
        }
    }

    #[test]
    fn psnr_closed_forms() {
        let a = Image::filled(4, 4, [0.5; 3]);
        let b = Image::filled(4, 4, [0.25, 0.25, 0.25]);
        assert_eq!(psnr(&a, &a).unwrap(), 100.0);
        let c = Image::filled(4, 4, [0.6, 0.6, 0.6]);
        assert!((psnr(&a, &c).unwrap() - 20.0).abs() < 1e-5);
        assert_eq!(psnr(&a, &b).unwrap(), psnr(&b, &a).unwrap());
        assert!(matches!(
            psnr(&a, &Image::filled(3, 4, [0.0; 3])),
            Err(EvalError::ShapeMismatch(..))
        ));
    }

    #[test]
    fn ssim_constant_images() {
        let (p, q) = (0.25f64, 0.75f64);
        let a = Image::filled(16, 12, [p as f32; 3]);
        let b = Image::filled(16, 12, [q as f32; 3]);
        let expected = (2.0 * p * q + SSIM_C1) / (p * p + q * q + SSIM_C1);
        assert!((ssim(&a, &b).unwrap() - expected).abs() < 1e-6);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        assert!(matches!(
            ssim(&Image::filled(10, 20, [0.0; 3]), &Image::filled(10, 20, [0.0; 3])),
            Err(EvalError::TooSmall { .. })
        ));
    }

    /// Direct SSIM formula over explicitly built windows.
    fn reference_ssim(a: &Image, b: &Image) -> f64 {
        let half = 5.0f64;
        let mut kernel = [[0.0f64; 11]; 11];
        let mut total = 0.0;
        for (j, row) in kernel.iter_mut().enumerate() {
            for (i, k) in row.iter_mut().enumerate() {
                let r2 = (i as f64 - half).powi(2) + (j as f64 - half).powi(2);
                *k = (-r2 / 4.5).exp();
                total += *k;
            }
        }
        let luma = |img: &Image, x: usize, y: usize| {
            let p = img.pixel(x, y);
            0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64
        };
        let mut sum = 0.0;
        let mut n = 0;
        for y in 0..=a.height - 11 {
            for x in 0..=a.width - 11 {
                let mut m = [0.0f64; 5];
                for j in 0..11 {
                    for i in 0..11 {
                        let w = kernel[j][i] / total;
                        let (p, q) = (luma(a, x + i, y + j), luma(b, x + i, y + j));
                        m[0] += w * p;
                        m[1] += w * q;
                        m[2] += w * p * p;
                        m[3] += w * q * q;
                        m[4] += w * p * q;
                    }
                }
                let (c1, c2) = (1e-4, 9e-4);
                let num = (2.0 * m[0] * m[1] + c1) * (2.0 * (m[4] - m[0] * m[1]) + c2);
                let den = (m[0] * m[0] + m[1] * m[1] + c1) * (m[2] - m[0] * m[0] + m[3] - m[1] * m[1] + c2);
                sum += num / den;
                n += 1;
            }
        }
        sum / n as f64
    }

    #[test]
    fn ssim_matches_reference() {
        for seed in 0..4 {
            let a = noisy(17, 14, seed);
            let b = noisy(17, 14, seed + 100);
            assert!((ssim(&a, &b).unwrap() - reference_ssim(&a, &b)).abs() < 1e-4);
        }
    }

    proptest! {
        #[test]
        fn ssim_is_symmetric_and_bounded(s1 in 0u64..1000, s2 in 0u64..1000) {
            let (a, b) = (noisy(12, 12, s1), noisy(12, 12, s2));
            let x = ssim(&a, &b).unwrap();
            prop_assert!((x - ssim(&b, &a).unwrap()).abs() < 1e-12);
            prop_assert!((-1.0..=1.0).contains(&x));
        }
    }

    #[test]
    fn compression_accounting() {
        let one = CompressionReport::new(1000, 8, 100, 1);
        assert_eq!(one.prior_bytes, 4 * 1008);
        assert_eq!(one.ratio, 1008.0 / 100.0);
        assert_eq!(one.marginal_bytes, 32);
        let mut prev = one.ratio;
        for n in 2..50 {
            let r = CompressionReport::new(1000, 8, 100, n);
            assert!(r.ratio < prev);
            assert_eq!(
                r.prior_bytes - CompressionReport::new(1000, 8, 100, n - 1).prior_bytes,
                r.marginal_bytes
            );
            prev = r.ratio;
        }
    }

    #[test]
    fn report_serializations() {
        let mut r = MetricsReport::with_views(vec![20.0, 30.0], vec![0.5, 0.7]);
        r.chamfer = Some(0.001);
        r.retrieval = vec![(1, 1.0)];
        assert_eq!(r.mean_psnr, 25.0);
        let kv = r.to_kv();
        assert!(kv.contains("mean_psnr=25.000000\n"));
        assert!(kv.contains("retrieval_top1=1.000000\n"));
        let back: MetricsReport = serde_json::from_str(&r.to_json()).unwrap();
        assert_eq!(back, r);
    }
}
