use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn hypnerf(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hypnerf"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = hypnerf(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}\n{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Small images and a small model so every command runs in seconds.
const TINY_MODEL: &[&str] = &[
    "--steps", "4", "--rays", "64", "--hidden", "16", "--shape-dim", "4", "--color-dim", "4", "--levels", "2",
    "--log2-table", "6", "--min-res", "2", "--max-res", "8", "--samples", "8", "--chunk", "32",
];

fn tiny_data(root: &Path) -> PathBuf {
    let dir = root.join("data");
    ok(&["--out", s(&dir), "gen-data", "--size", "16", "--views", "4", "--zero-density"]);
    dir
}

fn tiny_prior(root: &Path, data: &Path, name: &str, threads: &str) -> PathBuf {
    let out = root.join(name);
    let index = data.join("dataset.json");
    let mut args = vec!["--seed", "5", "--threads", threads, "--out", s(&out), "train-prior", "--data", s(&index)];
    args.extend_from_slice(TINY_MODEL);
    ok(&args);
    out.join("prior.ckpt")
}

#[test]
fn unknown_subcommand_is_a_usage_error() {
    let out = hypnerf(&["frobnicate"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
}

#[test]
fn missing_required_flag_is_a_usage_error() {
    let tmp = tempfile::tempdir().unwrap();
    let out = hypnerf(&["--out", s(tmp.path()), "train-prior"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn help_exits_cleanly() {
    let out = hypnerf(&["--help"]);
    assert_eq!(out.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&out.stdout).contains("gradcheck"));
}

#[test]
fn missing_dataset_is_a_data_error() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("nope.json");
    let out = hypnerf(&["--out", s(&tmp.path().join("o")), "train-prior", "--data", s(&missing)]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn corrupt_checkpoint_is_a_data_error() {
    let tmp = tempfile::tempdir().unwrap();
    let bad = tmp.path().join("bad.ckpt");
    fs::write(&bad, b"not a checkpoint").unwrap();
    let out = hypnerf(&["--out", s(&tmp.path().join("o")), "render", "--field", s(&bad)]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn zero_density_checkpoint_renders_white() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tiny_data(tmp.path());
    let out = tmp.path().join("render");
    ok(&[
        "--out",
        s(&out),
        "render",
        "--field",
        s(&data.join("zero_density.ckpt")),
        "--size",
        "16",
    ]);
    let frames: Vec<_> = fs::read_dir(out.join("render")).unwrap().collect();
    assert_eq!(frames.len(), 16);
    for f in frames {
        let img = hypnerf::scene::Image::read_png(&f.unwrap().path()).unwrap();
        assert!(img.data.iter().all(|&v| v == 1.0));
    }
}

#[test]
fn gradcheck_passes_on_fresh_init() {
    let tmp = tempfile::tempdir().unwrap();
    let stdout = ok(&["--out", s(tmp.path()), "gradcheck"]);
    let line = stdout.lines().find(|l| l.starts_with("max_rel_error=")).unwrap();
    let value: f64 = line.trim_start_matches("max_rel_error=").parse().unwrap();
    assert!(value < 1e-4);
    assert!(tmp.path().join("gradcheck.json").exists());
}

#[test]
fn config_echo_and_key_value_logs() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tiny_data(tmp.path());
    let prior = tiny_prior(tmp.path(), &data, "p", "1");
    let dir = prior.parent().unwrap();
    let echo: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.join("config.json")).unwrap()).unwrap();
    assert_eq!(echo["seed"], 5);
    assert_eq!(echo["command"]["command"], "train-prior");
    assert_eq!(echo["effective"]["train"]["steps"], 4);
    assert_eq!(echo["effective"]["model"]["hidden"], 16);
    let log = fs::read_to_string(dir.join("log.txt")).unwrap();
    assert!(log.lines().all(|l| l.split_whitespace().all(|kv| kv.contains('='))));
    assert!(log.contains("mean_psnr="));
}

#[test]
fn training_and_metrics_are_identical_across_thread_counts() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tiny_data(tmp.path());
    let a = tiny_prior(tmp.path(), &data, "a", "1");
    let b = tiny_prior(tmp.path(), &data, "b", "3");
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    let index = data.join("dataset.json");
    for (prior, name, threads) in [(&a, "ma", "1"), (&b, "mb", "3")] {
        ok(&[
            "--threads",
            threads,
            "--out",
            s(&tmp.path().join(name)),
            "metrics",
            "--prior",
            s(prior),
            "--data",
            s(&index),
            "--mesh-resolution",
            "12",
            "--level",
            "0.5",
            "--samples",
            "8",
        ]);
    }
    for file in ["metrics.json", "metrics.txt"] {
        assert_eq!(
            fs::read(tmp.path().join("ma").join(file)).unwrap(),
            fs::read(tmp.path().join("mb").join(file)).unwrap()
        );
    }
}

#[test]
fn swapping_twice_restores_the_renders() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tiny_data(tmp.path());
    let prior = tiny_prior(tmp.path(), &data, "p", "1");
    let once = tmp.path().join("once");
    let twice = tmp.path().join("twice");
    let (a, b) = ("instance_000", "instance_002");
    ok(&["--out", s(&once), "swap-codes", "--prior", s(&prior), a, b, "--size", "16"]);
    ok(&["--out", s(&twice), "swap-codes", "--prior", s(&once.join("prior.ckpt")), a, b, "--size", "16"]);
    for id in [a, b] {
        let orig = tmp.path().join(format!("orig_{id}"));
        ok(&["--out", s(&orig), "render", "--prior", s(&prior), "--instance", id, "--size", "16"]);
        for k in 0..16 {
            let frame = format!("{k:03}.png");
            assert_eq!(
                fs::read(orig.join("render").join(&frame)).unwrap(),
                fs::read(twice.join("render").join(id).join(&frame)).unwrap()
            );
        }
    }
    assert_eq!(fs::read(&prior).unwrap(), fs::read(twice.join("prior.ckpt")).unwrap());
}

#[test]
fn every_subcommand_runs_end_to_end() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let data = tiny_data(root);
    let index = data.join("dataset.json");
    let prior = tiny_prior(root, &data, "p", "2");

    let inv = root.join("inv");
    let held = data.join("heldout").join("instance_001").join("transforms.json");
    let log = ok(&[
        "--out", s(&inv), "invert", "--prior", s(&prior), "--views", s(&held), "--only", "0", "--steps", "3",
        "--rays", "64",
    ]);
    assert!(log.contains("unchanged=true"));
    assert!(inv.join("codes.json").exists() && inv.join("field.ckpt").exists());

    let den = root.join("den");
    ok(&[
        "--out", s(&den), "denoise-train", "--prior", s(&prior), "--data", s(&index), "--steps", "2", "--batch", "2",
    ]);
    let frames = root.join("frames");
    ok(&[
        "--out",
        s(&root.join("export")),
        "denoise-finetune",
        "--field",
        s(&inv.join("field.ckpt")),
        "--export-frames",
        s(&frames),
        "--size",
        "16",
    ]);
    assert!(frames.join("047.png").exists());
    for (name, extra) in [
        ("dnf", vec!["--denoiser", s(&den.join("denoiser.ckpt"))]),
        ("dnf_import", vec!["--import-frames", s(&frames)]),
    ] {
        let out = root.join(name);
        let mut args = vec![
            "--out", s(&out), "denoise-finetune", "--prior", s(&prior), "--instance", "instance_001", "--size", "16",
            "--steps", "2", "--rays", "64", "--mesh-resolution", "0",
        ];
        args.extend(extra);
        ok(&args);
        assert!(out.join("field.ckpt").exists());
    }

    let q = root.join("q");
    let log = ok(&[
        "--out", s(&q), "train-query", "--prior", s(&prior), "--data", s(&index), "--steps", "5", "--hidden", "16",
    ]);
    assert!(log.contains("retrieval_top1="));
    let image = data.join("instance_002").join("images").join("001.png");
    let found = root.join("found");
    ok(&[
        "--out",
        s(&found),
        "query",
        "--prior",
        s(&prior),
        "--query-net",
        s(&q.join("query.ckpt")),
        "--image",
        s(&image),
        "--snap",
    ]);
    let result: serde_json::Value = serde_json::from_str(&fs::read_to_string(found.join("query.json")).unwrap()).unwrap();
    assert!(result["id"].as_str().unwrap().starts_with("instance_"));
    assert!(found.join("render").join("015.png").exists());

    let mesh = root.join("mesh");
    ok(&["--out", s(&mesh), "mesh", "--prior", s(&prior), "--codes", s(&found.join("codes.json")), "--resolution", "10", "--level", "0.5"]);
    assert!(mesh.join("mesh.obj").exists());

    let comp = root.join("comp");
    let log = ok(&["--out", s(&comp), "compress-report", "--prior", s(&prior), "--instances", "10,100"]);
    assert_eq!(log.lines().filter(|l| l.starts_with("instances=")).count(), 3);
    assert!(log.contains("marginal_bytes=32"));

    let metrics = root.join("metrics");
    ok(&[
        "--out", s(&metrics), "metrics", "--prior", s(&prior), "--data", s(&index), "--query-net",
        s(&q.join("query.ckpt")), "--mesh-resolution", "0", "--samples", "8",
    ]);
    let report = fs::read_to_string(metrics.join("metrics.txt")).unwrap();
    assert!(report.contains("retrieval_top1=") && report.contains("ratio="));
}

#[test]
fn field_source_flags_are_validated() {
    let tmp = tempfile::tempdir().unwrap();
    let out = hypnerf(&["--out", s(tmp.path()), "render", "--instance", "x"]);
    assert_eq!(out.status.code(), Some(1));
}
