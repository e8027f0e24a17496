use std::fs;
use std::path::Path;

use hypnerf::denoise::{
    default_poses, finetune, read_frames, render_views, train_denoiser, write_frames, DenoiseConfig,
    DenoiserParams, DenoiserTrainConfig,
};
use hypnerf::desk;
use hypnerf::diagnostics::{gradient_suite, FD_STEP};
use hypnerf::evaluation::{
    chamfer, compression_report, evaluate_views, extract_mesh, reference_mesh, retrieval_accuracy,
    CompressionReport, MetricsReport,
};
use hypnerf::field::{render_image, FieldConfig, NerfParams, RenderConfig};
use hypnerf::hash_encoding::HashGridConfig;
use hypnerf::hypernet::{swap_codes as exchange, HypernetConfig, InstanceCodes};
use hypnerf::scene::{
    desk_scenes, generate_synthetic_dataset, load_checkpoint, load_manifest, orbit_ring, save_checkpoint,
    save_manifest, CameraIntrinsics, Image, Pose, View,
};
use hypnerf::training::{
    query as retrieve, test_time_optimize, train_prior as fit, train_query_net, Embedder, FieldModel,
    FileEmbedding, LossNorm, PriorModel, QueryConfig, QueryNetParams, TrainConfig, TrivialEmbedding,
    TtoConfig, TtoInit,
};
use serde_json::json;

use crate::error::CliError;
use crate::{
    CompressArgs, DenoiseFinetuneArgs, DenoiseTrainArgs, EncodingKind, FieldSource, GenDataArgs, InvertArgs,
    LossKind, MeshArgs, MetricsArgs, PoseSet, QueryArgs, RenderArgs, Run, SwapArgs, TrainPriorArgs,
    TrainQueryArgs,
};

/// Surface samples per mesh for Chamfer distances.
const CHAMFER_SAMPLES: usize = 2000;

fn intrinsics(size: usize) -> CameraIntrinsics {
    CameraIntrinsics::from_fov(size, size, desk::FOV_DEGREES)
}

fn eval_render(samples: usize) -> RenderConfig {
    RenderConfig {
        samples_per_ray: samples,
        ..desk::eval_render()
    }
}

fn load_prior(path: &Path) -> Result<PriorModel, CliError> {
    Ok(load_checkpoint(path)?)
}

fn load_field(src: &FieldSource) -> Result<(FieldConfig, NerfParams<f32>), CliError> {
    match (&src.field, &src.prior) {
        (Some(path), None) => {
            if src.instance.is_some() || src.codes.is_some() {
                return Err(CliError::usage("--instance and --codes need --prior, not --field"));
            }
            let model: FieldModel = load_checkpoint(path)?;
            Ok((model.config, model.params))
        }
        (None, Some(path)) => {
            let prior = load_prior(path)?;
            let codes = match (&src.instance, &src.codes) {
                (Some(id), None) => prior.codebook.get(prior.codebook.index_of(id)?).clone(),
                (None, Some(file)) => serde_json::from_str::<InstanceCodes>(&fs::read_to_string(file)?)?,
                _ => return Err(CliError::usage("give exactly one of --instance or --codes with --prior")),
            };
            Ok((prior.config().field.clone(), prior.params_for(&codes)?))
        }
        _ => Err(CliError::usage("give exactly one of --field or --prior")),
    }
}

fn embedder(file: Option<&Path>) -> Result<Box<dyn Embedder>, CliError> {
    Ok(match file {
        Some(p) => Box::new(FileEmbedding::from_json(p)?),
        None => Box::new(TrivialEmbedding::default()),
    })
}

fn write_renders(
    dir: &Path,
    params: &NerfParams<f32>,
    cfg: &FieldConfig,
    intr: &CameraIntrinsics,
    poses: &[Pose],
    render: &RenderConfig,
) -> Result<(), CliError> {
    fs::create_dir_all(dir)?;
    for (k, pose) in poses.iter().enumerate() {
        render_image(params, cfg, intr, pose, render)?.write_png(&dir.join(format!("{k:03}.png")))?;
    }
    Ok(())
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

pub fn gen_data(run: &mut Run, a: &GenDataArgs) -> Result<(), CliError> {
    if a.views == 0 || a.size == 0 {
        return Err(CliError::usage("--views and --size must be positive"));
    }
    let intr = intrinsics(a.size);
    let poses = orbit_ring(a.views, &[a.elevation], desk::CAMERA_RADIUS, 0.0);
    let train = generate_synthetic_dataset(&desk_scenes(), &poses, &intr)?;
    let index = save_manifest(&train, &run.out)?;
    let heldout = generate_synthetic_dataset(&desk_scenes(), &desk::eval_poses(), &intr)?;
    let held_index = save_manifest(&heldout, &run.path("heldout"))?;
    run.log(format!(
        "instances={} views={} size={} index={} heldout={}",
        train.instances.len(),
        a.views,
        a.size,
        index.display(),
        held_index.display()
    ));
    if a.zero_density {
        let config = desk::prior_config().field;
        let mut params = NerfParams::<f32>::zeros(&config);
        // Density logit -100 gives softplus ~ 0 everywhere.
        params.layers[config.trunk_layers - 1].bias.data_mut()[0] = -100.0;
        let path = run.path("zero_density.ckpt");
        save_checkpoint(&FieldModel { config, params }, &path)?;
        run.log(format!("zero_density={}", path.display()));
    }
    Ok(())
}

pub fn train_prior(run: &mut Run, a: &TrainPriorArgs) -> Result<(), CliError> {
    let data = load_manifest(&a.data)?;
    let field = match a.encoding {
        EncodingKind::Hash => {
            if a.log2_table > 24 {
                return Err(CliError::usage("--log2-table must be at most 24"));
            }
            FieldConfig::hash(HashGridConfig {
                levels: a.levels,
                table_size: 1 << a.log2_table,
                features: a.features,
                n_min: a.min_res,
                n_max: a.max_res,
            })
        }
        EncodingKind::Posenc => FieldConfig::frequency(a.bands),
    };
    let model_cfg = HypernetConfig {
        shape_dim: a.shape_dim,
        color_dim: a.color_dim,
        hidden: a.hidden,
        field,
    };
    let train = TrainConfig {
        steps: a.steps,
        rays_per_batch: a.rays,
        instances_per_batch: a.instances_per_batch,
        lr: a.lr,
        lr_final_factor: a.lr_final,
        seed: run.seed,
        loss: match a.loss {
            LossKind::Squared => LossNorm::Squared,
            LossKind::Absolute => LossNorm::Absolute,
        },
        render: RenderConfig {
            samples_per_ray: a.samples,
            stratified: true,
            ..RenderConfig::default()
        },
        chunk_rays: a.chunk,
        log_every: a.log_every,
        ..TrainConfig::default()
    };
    train.validate().map_err(|e| CliError::usage(e.to_string()))?;
    model_cfg.field.validate().map_err(|e| CliError::usage(e.to_string()))?;
    run.echo_effective(&json!({ "model": model_cfg, "train": train }))?;
    let prior = fit(&data, &model_cfg, &train, &mut |s| run.log(s.to_string()))?;
    let path = run.path("prior.ckpt");
    save_checkpoint(&prior, &path)?;
    let mut psnrs = Vec::new();
    for (i, inst) in data.instances.iter().enumerate() {
        let params = prior.instance_params(i)?;
        let (p, _) = evaluate_views(&params, &model_cfg.field, &inst.intrinsics, &inst.views, &eval_render(a.samples))?;
        run.log(format!("instance={} psnr={:.4}", inst.id, mean(&p)));
        psnrs.extend(p);
    }
    run.log(format!(
        "mean_psnr={:.4} checksum={:08x} checkpoint={}",
        mean(&psnrs),
        prior.checksum(),
        path.display()
    ));
    Ok(())
}

pub fn invert(run: &mut Run, a: &InvertArgs) -> Result<(), CliError> {
    let prior = load_prior(&a.prior)?;
    let data = load_manifest(&a.views)?;
    let inst = data
        .instances
        .get(a.index)
        .ok_or_else(|| CliError::usage(format!("--index {} but {} instances", a.index, data.instances.len())))?;
    let views: Vec<View> = if a.only.is_empty() {
        inst.views.clone()
    } else {
        a.only
            .iter()
            .map(|&k| {
                inst.views
                    .get(k)
                    .cloned()
                    .ok_or_else(|| CliError::usage(format!("view {k} out of range")))
            })
            .collect::<Result<_, _>>()?
    };
    let init = match &a.init {
        Some(id) => TtoInit::Entry(prior.codebook.index_of(id)?),
        None => TtoInit::CodebookMean,
    };
    let cfg = TtoConfig {
        steps: a.steps,
        rays_per_batch: a.rays,
        lr: a.lr,
        seed: run.seed,
        init,
        log_every: a.log_every,
        ..TtoConfig::default()
    };
    run.echo_effective(&cfg)?;
    let before = prior.checksum();
    let result = test_time_optimize(&prior, &inst.intrinsics, &views, &cfg, &mut |s| run.log(s.to_string()))?;
    let params = prior.params_for(&result.codes)?;
    let field = prior.config().field.clone();
    let (psnrs, _) = evaluate_views(&params, &field, &inst.intrinsics, &views, &desk::eval_render())?;
    write_json(&run.path("codes.json"), &result.codes)?;
    save_checkpoint(&FieldModel { config: field, params }, &run.path("field.ckpt"))?;
    run.log(format!(
        "best_loss={:.6e} best_step={} views={} psnr={:.4} prior_checksum={:08x} unchanged={}",
        result.best_loss,
        result.best_step,
        views.len(),
        mean(&psnrs),
        prior.checksum(),
        before == prior.checksum()
    ));
    Ok(())
}

pub fn denoise_train(run: &mut Run, a: &DenoiseTrainArgs) -> Result<(), CliError> {
    let denoiser = if a.identity {
        DenoiserParams::Identity
    } else {
        let prior = load_prior(&a.prior)?;
        let data = load_manifest(&a.data)?;
        let field = &prior.config().field;
        let mut pairs = Vec::new();
        for inst in &data.instances {
            let params = prior.instance_params(prior.codebook.index_of(&inst.id)?)?;
            for v in &inst.views {
                let noisy = render_image(&params, field, &inst.intrinsics, &v.pose, &desk::eval_render())?;
                pairs.push((noisy, v.image.clone()));
            }
        }
        let cfg = DenoiserTrainConfig {
            steps: a.steps,
            lr: a.lr,
            batch: a.batch,
            seed: run.seed,
            log_every: a.log_every,
        };
        run.echo_effective(&cfg)?;
        run.log(format!("pairs={}", pairs.len()));
        train_denoiser(&pairs, &cfg, &mut |s| run.log(s.to_string()))?
    };
    let path = run.path("denoiser.ckpt");
    save_checkpoint(&denoiser, &path)?;
    run.log(format!("denoiser={}", path.display()));
    Ok(())
}

pub fn denoise_finetune(run: &mut Run, a: &DenoiseFinetuneArgs) -> Result<(), CliError> {
    if a.export_frames.is_some() && a.import_frames.is_some() {
        return Err(CliError::usage("--export-frames and --import-frames are exclusive"));
    }
    let (field, params) = load_field(&a.source)?;
    let intr = intrinsics(a.size);
    let cfg = DenoiseConfig {
        poses: default_poses(desk::CAMERA_RADIUS),
        finetune_steps: a.steps,
        finetune_lr: a.lr,
        rays_per_batch: a.rays,
        seed: run.seed,
        log_every: a.log_every,
        ..DenoiseConfig::default()
    };
    run.echo_effective(&cfg)?;
    if let Some(dir) = &a.export_frames {
        let frames = render_views(&params, &field, &intr, &cfg.poses, &cfg.render)?;
        write_frames(dir, &frames)?;
        run.log(format!("exported={} dir={}", frames.len(), dir.display()));
        return Ok(());
    }
    let images: Vec<Image> = match &a.import_frames {
        Some(dir) => read_frames(dir, cfg.poses.len())?,
        None => {
            let denoiser = match &a.denoiser {
                Some(p) => load_checkpoint(p)?,
                None => DenoiserParams::Identity,
            };
            let frames = render_views(&params, &field, &intr, &cfg.poses, &cfg.render)?;
            denoiser.apply_all(&frames)?
        }
    };
    write_frames(&run.path("denoised"), &images)?;
    let views: Vec<View> = cfg
        .poses
        .iter()
        .zip(images)
        .enumerate()
        .map(|(k, (pose, image))| View {
            pose: *pose,
            image,
            file: format!("{k:03}.png"),
        })
        .collect();
    let refined = finetune(&params, &field, &intr, &views, &cfg, &mut |s| run.log(s.to_string()))?;
    let (psnrs, _) = evaluate_views(&refined, &field, &intr, &views, &desk::eval_render())?;
    run.log(format!("finetuned_psnr={:.4}", mean(&psnrs)));
    if a.mesh_resolution > 0 {
        let before = extract_mesh(&params, &field, a.mesh_resolution, a.level)?;
        let after = extract_mesh(&refined, &field, a.mesh_resolution, a.level)?;
        if before.is_empty() || after.is_empty() {
            run.log("chamfer=skipped reason=empty_mesh");
        } else {
            let d = chamfer(&before, &after, CHAMFER_SAMPLES, run.seed)?;
            run.log(format!("chamfer_before_after={d:.8}"));
        }
    }
    save_checkpoint(
        &FieldModel {
            config: field,
            params: refined,
        },
        &run.path("field.ckpt"),
    )?;
    Ok(())
}

pub fn train_query(run: &mut Run, a: &TrainQueryArgs) -> Result<(), CliError> {
    let prior = load_prior(&a.prior)?;
    let data = load_manifest(&a.data)?;
    let embed = embedder(a.embeddings.as_deref())?;
    let cfg = QueryConfig {
        steps: a.steps,
        lr: a.lr,
        batch: a.batch,
        hidden: a.hidden,
        seed: run.seed,
        log_every: a.log_every,
    };
    run.echo_effective(&cfg)?;
    let net = train_query_net(&prior.codebook, &data, embed.as_ref(), &cfg, &mut |s| run.log(s.to_string()))?;
    let top1 = retrieval_accuracy(&net, &prior.codebook, &data, embed.as_ref(), 1)?;
    save_checkpoint(&net, &run.path("query.ckpt"))?;
    run.log(format!("retrieval_top1={top1:.6}"));
    Ok(())
}

pub fn query(run: &mut Run, a: &QueryArgs) -> Result<(), CliError> {
    let prior = load_prior(&a.prior)?;
    let net: QueryNetParams = load_checkpoint(&a.query_net)?;
    let image = Image::read_png(&a.image)?;
    let embed = embedder(a.embeddings.as_deref())?;
    let found = retrieve(&net, &prior.codebook, &embed.embed(&image, a.key.as_deref())?)?;
    let codes = if a.snap {
        prior.codebook.get(found.nearest).clone()
    } else {
        found.codes.clone()
    };
    write_json(&run.path("codes.json"), &codes)?;
    write_json(&run.path("query.json"), &json!({ "id": found.id, "nearest": found.nearest }))?;
    let intr = CameraIntrinsics::from_fov(image.width, image.height, desk::FOV_DEGREES);
    let params = prior.params_for(&codes)?;
    write_renders(
        &run.path("render"),
        &params,
        &prior.config().field,
        &intr,
        &desk::eval_poses(),
        &desk::eval_render(),
    )?;
    run.log(format!("id={} nearest={}", found.id, found.nearest));
    Ok(())
}

pub fn render(run: &mut Run, a: &RenderArgs) -> Result<(), CliError> {
    let (field, params) = load_field(&a.source)?;
    let poses = match a.poses {
        PoseSet::Train => desk::train_poses(),
        PoseSet::Eval => desk::eval_poses(),
        PoseSet::Denoise => default_poses(desk::CAMERA_RADIUS),
    };
    write_renders(&run.path("render"), &params, &field, &intrinsics(a.size), &poses, &eval_render(a.samples))?;
    run.log(format!("frames={} dir={}", poses.len(), run.path("render").display()));
    Ok(())
}

pub fn mesh(run: &mut Run, a: &MeshArgs) -> Result<(), CliError> {
    let (field, params) = load_field(&a.source)?;
    let mesh = extract_mesh(&params, &field, a.resolution, a.level)?;
    let path = run.path("mesh.obj");
    mesh.write_obj(&path)?;
    run.log(format!(
        "vertices={} triangles={} area={:.6} obj={}",
        mesh.vertices.len(),
        mesh.triangles.len(),
        mesh.area(),
        path.display()
    ));
    Ok(())
}

pub fn metrics(run: &mut Run, a: &MetricsArgs) -> Result<(), CliError> {
    let prior = load_prior(&a.prior)?;
    let data = load_manifest(&a.data)?;
    let field = &prior.config().field;
    let (mut psnrs, mut ssims, mut chamfers) = (Vec::new(), Vec::new(), Vec::new());
    for inst in &data.instances {
        let params = prior.instance_params(prior.codebook.index_of(&inst.id)?)?;
        let (p, s) = evaluate_views(&params, field, &inst.intrinsics, &inst.views, &eval_render(a.samples))?;
        run.log(format!("instance={} psnr={:.4} ssim={:.4}", inst.id, mean(&p), mean(&s)));
        psnrs.extend(p);
        ssims.extend(s);
        if let (Some(spec), true) = (&inst.spec, a.mesh_resolution > 0) {
            let truth = reference_mesh(spec, a.mesh_resolution)?;
            let fitted = extract_mesh(&params, field, a.mesh_resolution, a.level)?;
            if fitted.is_empty() || truth.is_empty() {
                run.log(format!("instance={} chamfer=skipped reason=empty_mesh", inst.id));
            } else {
                let d = chamfer(&fitted, &truth, CHAMFER_SAMPLES, run.seed)?;
                run.log(format!("instance={} chamfer={d:.8}", inst.id));
                chamfers.push(d);
            }
        }
    }
    let mut report = MetricsReport::with_views(psnrs, ssims);
    if !chamfers.is_empty() {
        report.chamfer = Some(mean(&chamfers));
    }
    if let Some(path) = &a.query_net {
        let net: QueryNetParams = load_checkpoint(path)?;
        let embed = embedder(a.embeddings.as_deref())?;
        for k in [1, 3] {
            if k <= prior.codebook.len() {
                let acc = retrieval_accuracy(&net, &prior.codebook, &data, embed.as_ref(), k)?;
                report.retrieval.push((k, acc));
            }
        }
    }
    report.compression = Some(compression_report(&prior, None));
    fs::write(run.path("metrics.txt"), report.to_kv())?;
    fs::write(run.path("metrics.json"), report.to_json() + "\n")?;
    run.log(format!("mean_psnr={:.4} mean_ssim={:.4}", report.mean_psnr, report.mean_ssim));
    Ok(())
}

fn log_report(run: &mut Run, r: &CompressionReport) {
    run.log(format!(
        "instances={} hypernet_params={} code_dim={} baseline_params={} prior_bytes={} baseline_bytes={} marginal_bytes={} ratio={:.6} gain={:.4}",
        r.instances,
        r.hypernet_params,
        r.code_dim,
        r.baseline_params,
        r.prior_bytes,
        r.baseline_bytes,
        r.marginal_bytes,
        r.ratio,
        r.gain()
    ));
}

pub fn compress_report(run: &mut Run, a: &CompressArgs) -> Result<(), CliError> {
    let prior = load_prior(&a.prior)?;
    let base = compression_report(&prior, a.baseline_params);
    let mut reports = vec![base.clone()];
    for &n in &a.instances {
        if n == 0 {
            return Err(CliError::usage("instance counts must be positive"));
        }
        reports.push(CompressionReport::new(base.hypernet_params, base.code_dim, base.baseline_params, n));
    }
    for r in &reports {
        log_report(run, r);
    }
    write_json(&run.path("compression.json"), &reports)
}

pub fn swap_codes(run: &mut Run, a: &SwapArgs) -> Result<(), CliError> {
    let mut prior = load_prior(&a.prior)?;
    let (ia, ib) = (prior.codebook.index_of(&a.a)?, prior.codebook.index_of(&a.b)?);
    let (x, y) = exchange(prior.codebook.get(ia), prior.codebook.get(ib))?;
    *prior.codebook.get_mut(ia) = x;
    *prior.codebook.get_mut(ib) = y;
    let path = run.path("prior.ckpt");
    save_checkpoint(&prior, &path)?;
    let field = prior.config().field.clone();
    for (i, id) in [(ia, &a.a), (ib, &a.b)] {
        let params = prior.instance_params(i)?;
        let dir = run.path("render").join(id);
        write_renders(&dir, &params, &field, &intrinsics(a.size), &desk::eval_poses(), &desk::eval_render())?;
    }
    run.log(format!("swapped={},{} checkpoint={}", a.a, a.b, path.display()));
    Ok(())
}

pub fn gradcheck(run: &mut Run) -> Result<(), CliError> {
    let report = gradient_suite(run.seed)?;
    write_json(&run.path("gradcheck.json"), &report)?;
    run.log(format!(
        "step={FD_STEP:e} coordinates={} hash_tables={:.3e} field_mlp={:.3e} hypernet_weights={:.3e} shape_code={:.3e} color_code={:.3e}",
        report.checked_coordinates,
        report.hash_tables,
        report.field_mlp,
        report.hypernet_weights,
        report.shape_code,
        report.color_code
    ));
    let worst = report.max();
    run.log(format!("max_rel_error={worst:.3e}"));
    if worst < 1e-4 {
        Ok(())
    } else {
        Err(CliError::numeric(format!("max relative error {worst:.3e} exceeds 1e-4")))
    }
}
