use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};

fn tiny_config(seed: u64) -> Value {
    json!({
        "dataset": {
            "height": 8, "width": 8, "coils": 1, "acceleration": 2.0, "acs": 2,
            "noise_sd": 0.0, "n_samples": 10, "seed": seed, "mask_kind": "golden_ratio"
        },
        "preset": "desk",
        "model": {
            "levels": 2, "steps": 1, "hidden": 6, "cond_base": 4, "cond_pools": 1,
            "tap_width": 3, "seed": seed
        },
        "train": {
            "pretrain_epochs": 1, "joint_epochs": 2, "batch_size": 4, "pretrain_lr": 1e-3,
            "joint_lr": 1e-3, "seed": seed, "val_fraction": 0.2, "nullspace_learning": true,
            "data_consistency": true, "skip_pretrain": false, "dither_sd": 0.01,
            "init_batch": 8, "workers": 2
        },
        "eval": {
            "posterior_samples": 4, "sample_seed": seed, "combine": "sense", "map_iters": 5,
            "map_lr": 1e-4, "gain_p": [1, 2, 4], "gain_trials": 3
        }
    })
}

struct Env {
    dir: tempfile::TempDir,
}

impl Env {
    fn new(seed: u64) -> Self {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("config.json"), tiny_config(seed).to_string()).unwrap();
        Self { dir }
    }

    fn path(&self, p: &str) -> PathBuf {
        self.dir.path().join(p)
    }

    fn run(&self, args: &[&str]) -> Output {
        let cfg = self.path("config.json");
        Command::new(env!("CARGO_BIN_EXE_flownull"))
            .arg("--config")
            .arg(&cfg)
            .args(args)
            .current_dir(self.dir.path())
            .env("FLOWNULL_THREADS", "1")
            .output()
            .unwrap()
    }

    fn ok(&self, args: &[&str]) -> Value {
        let out = self.run(args);
        assert!(
            out.status.success(),
            "{args:?} failed: {}",
            String::from_utf8_lossy(&out.stderr)
        );
        serde_json::from_slice(&out.stdout).unwrap()
    }

    fn err(&self, args: &[&str]) -> Value {
        let out = self.run(args);
        assert!(!out.status.success(), "{args:?} unexpectedly succeeded");
        let line = String::from_utf8_lossy(&out.stderr);
        serde_json::from_str(line.trim()).unwrap_or_else(|_| panic!("not json: {line}"))
    }
}

fn files_under(root: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p.strip_prefix(root).unwrap().to_path_buf());
            }
        }
    }
    out.sort();
    out
}

fn csv_rows(path: &Path) -> Vec<Vec<String>> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(str::to_owned).collect())
        .collect()
}

#[test]
fn simulate_is_complete_and_reproducible() {
    let env = Env::new(3);
    let s = env.ok(&["simulate", "--out", "data"]);
    assert_eq!(s["n_samples"], 10);
    let data = env.path("data");
    let dirs = fs::read_dir(&data)
        .unwrap()
        .filter(|e| e.as_ref().unwrap().path().is_dir())
        .count();
    assert_eq!(dirs, 10);
    let manifest: Value =
        serde_json::from_str(&fs::read_to_string(data.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["n_samples"], 10);
    assert_eq!(manifest["config_hash"], s["config_hash"]);
    assert!(data.join("sample_00000/truth.fnt").exists());
    assert!(data.join("sample_00000/mask.json").exists());

    env.ok(&["simulate", "--out", "again"]);
    let a = files_under(&data);
    assert_eq!(a, files_under(&env.path("again")));
    for f in &a {
        assert_eq!(
            fs::read(data.join(f)).unwrap(),
            fs::read(env.path("again").join(f)).unwrap(),
            "{f:?} differs"
        );
    }
}

#[test]
fn refuses_to_overwrite_without_force() {
    let env = Env::new(1);
    env.ok(&["simulate", "--out", "data"]);
    let e = env.err(&["simulate", "--out", "data"]);
    assert_eq!(e["error"], "input");
    assert!(e["message"].as_str().unwrap().contains("--force"));
    env.ok(&["--force", "simulate", "--out", "data"]);
}

#[test]
fn errors_are_reported_as_json() {
    let env = Env::new(1);
    let e = env.err(&["pretrain", "--data", "missing", "--out", "ck"]);
    assert_eq!(e["error"], "input");
    fs::write(env.path("config.json"), "{\"dataset\": 1}").unwrap();
    let e = env.err(&["simulate", "--out", "data"]);
    assert_eq!(e["error"], "input");
}

#[test]
fn config_seed_override_changes_the_hash() {
    let env = Env::new(1);
    let a = env.ok(&["simulate", "--out", "a"]);
    let b = env.ok(&["--seed", "9", "simulate", "--out", "b"]);
    assert_ne!(a["config_hash"], b["config_hash"]);
}

#[test]
fn full_pipeline() {
    let env = Env::new(2);
    env.ok(&["simulate", "--out", "data"]);

    // Truth scored against itself.
    let s = env.ok(&[
        "eval", "--data", "data", "--estimates", "data", "--file", "truth.fnt", "--out", "ev0",
    ]);
    assert_eq!(s["images"], 10);
    assert_eq!(s["mean_psnr"], "inf");
    assert_eq!(s["mean_cpsnr"], "inf");
    assert!((s["mean_ssim"].as_f64().unwrap() - 1.0).abs() < 1e-12);
    for row in csv_rows(&env.path("ev0/metrics.csv")) {
        assert_eq!(row[1], "inf");
    }

    env.ok(&["pretrain", "--data", "data", "--out", "pre"]);
    assert!(env.path("pre/manifest.json").exists());
    let t = env.ok(&["train", "--data", "data", "--out", "ck", "--init", "pre"]);
    assert_eq!(t["epochs"], 2);
    let log = csv_rows(&env.path("ck/train_log.csv"));
    assert_eq!(log.len(), 2);
    assert!(env.path("ck/state/train_state.json").exists());

    // Resuming a finished run adds nothing.
    let r = env.ok(&["train", "--data", "data", "--out", "ck", "--resume"]);
    assert_eq!(r["epochs"], 2);
    assert_eq!(csv_rows(&env.path("ck/train_log.csv")).len(), 2);

    let s = env.ok(&[
        "sample", "--checkpoint", "ck", "--data", "data", "--out", "post", "--index", "1",
    ]);
    assert!(s["max_consistency_residual"].as_f64().unwrap() < 1e-9);
    let side: Value = serde_json::from_str(
        &fs::read_to_string(env.path("post/sample_00001/sidecar.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(side["raw_generator_output"], false);
    assert_eq!(side["latent_streams"].as_array().unwrap().len(), 4);
    assert!(env.path("post/sample_00001/mean.pgm").exists());
    assert!(env.path("post/sample_00001/sample_3.pgm").exists());

    env.ok(&[
        "sample", "--checkpoint", "ck", "--data", "data", "--out", "raw", "--index", "1", "--raw",
    ]);
    let side: Value = serde_json::from_str(
        &fs::read_to_string(env.path("raw/sample_00001/sidecar.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(side["raw_generator_output"], true);

    let e = env.ok(&["eval", "--data", "data", "--estimates", "post", "--out", "ev1"]);
    assert_eq!(e["images"], 1);
    assert!(e["mean_psnr"].as_f64().unwrap().is_finite());

    let m = env.ok(&[
        "map", "--checkpoint", "ck", "--data", "data", "--out", "map", "--index", "0",
    ]);
    assert_eq!(m["measurements"], 1);
    let info: Value =
        serde_json::from_str(&fs::read_to_string(env.path("map/sample_00000/map.json")).unwrap())
            .unwrap();
    let trace: Vec<f64> = serde_json::from_value(info["trace_bpd"].clone()).unwrap();
    assert_eq!(trace.len(), 6);
    assert!(trace.windows(2).all(|w| w[1] >= w[0]));
    env.ok(&[
        "eval", "--data", "data", "--estimates", "map", "--file", "estimate.fnt", "--out", "ev2",
    ]);

    let g = env.ok(&["gaincurve", "--checkpoint", "ck", "--data", "data", "--out", "gain"]);
    assert_eq!(g["trials"], 3);
    let rows = csv_rows(&env.path("gain/gain.csv"));
    assert_eq!(rows.len(), 3);
    assert_eq!(rows[0][0], "1");
    assert_eq!(rows[0][2].parse::<f64>().unwrap(), 0.0);
    assert_eq!(rows[0][1].parse::<f64>().unwrap(), 0.0);

    // Estimates produced under another configuration.
    fs::write(env.path("config.json"), tiny_config(5).to_string()).unwrap();
    let e = env.err(&["train", "--data", "data", "--out", "ck", "--resume"]);
    assert_eq!(e["error"], "mixed_config");
    env.ok(&[
        "sample", "--checkpoint", "ck", "--data", "data", "--out", "other", "--index", "2",
    ]);
    let e = env.err(&["eval", "--data", "data", "--estimates", "other", "--out", "ev3"]);
    assert_eq!(e["error"], "mixed_config");
    env.ok(&[
        "eval", "--data", "data", "--estimates", "other", "--out", "ev3", "--allow-mixed",
    ]);
}
