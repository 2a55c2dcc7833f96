use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use flownull::flow::checkpoint::{read_params, save_model, write_params};
use flownull::flow::{load_model, FlowModel, Manifest};
use flownull::metrics::{cpsnr, gain_curve, psnr, ssim, GainReference, GainTrial};
use flownull::mri::dataset::{
    list_samples, read_sample, sample_dir_name, simulate_sample, stored_to_sim, write_sample,
    SimSample,
};
use flownull::mri::pgm::write_pgm;
use flownull::mri::{coil_combine_sense, CoilStack};
use flownull::num::io::{load, write_complex, write_real, DType, StoredTensor};
use flownull::num::tensor::{ComplexTensor, Tensor};
use flownull::posterior::{
    combine, map_estimate, posterior_mean, sample_posterior, CombinedImage, MapConfig, MapInit,
    SampleConfig,
};
use flownull::train::{pretrain_condnet, JointState, JointTrainer, TrainConfig, TrainSet};

use crate::config::RunConfig;
use crate::CliError;

const DATASET_FORMAT: &str = "flownull-dataset-1";

pub fn effective_config(
    path: Option<&Path>,
    preset: Option<flownull::train::Preset>,
    seed: Option<u64>,
) -> Result<RunConfig, CliError> {
    let mut cfg = match path {
        Some(p) => {
            let mut c = RunConfig::load(p)?;
            if let Some(pr) = preset {
                c.apply_preset(pr);
            }
            c
        }
        None => RunConfig::preset(preset.unwrap_or_default()),
    };
    if let Some(s) = seed {
        cfg.dataset.seed = s;
        cfg.model.seed = s;
        cfg.train.seed = s;
        cfg.eval.sample_seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Worker threads: the configured count, capped by `FLOWNULL_THREADS`.
fn workers(cfg: &RunConfig) -> usize {
    let cap = std::env::var("FLOWNULL_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&t| t > 0);
    match cap {
        Some(t) => cfg.train.workers.min(t),
        None => cfg.train.workers,
    }
}

fn train_config(cfg: &RunConfig) -> TrainConfig {
    TrainConfig {
        workers: workers(cfg),
        ..cfg.train.clone()
    }
}

fn prepare_out(dir: &Path, force: bool) -> Result<(), CliError> {
    if dir.exists() {
        let non_empty = fs::read_dir(dir)?.next().is_some();
        if non_empty && !force {
            return Err(CliError::Input(format!(
                "output directory {} is not empty (use --force to overwrite)",
                dir.display()
            )));
        }
        if non_empty {
            fs::remove_dir_all(dir)?;
        }
    }
    fs::create_dir_all(dir)?;
    Ok(())
}

fn write_json(path: &Path, v: &impl Serialize) -> Result<(), CliError> {
    let mut s = serde_json::to_string_pretty(v)?;
    s.push('\n');
    fs::write(path, s)?;
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Input(format!("cannot read {}: {e}", path.display())))?;
    Ok(serde_json::from_str(&text)?)
}

/// JSON number, or a string for non-finite values.
fn num(v: f64) -> Value {
    if v.is_finite() {
        json!(v)
    } else if v.is_nan() {
        json!("nan")
    } else if v > 0.0 {
        json!("inf")
    } else {
        json!("-inf")
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct DatasetManifest {
    format: String,
    config_hash: String,
    n_samples: usize,
    height: usize,
    width: usize,
    coils: usize,
    config: RunConfig,
}

struct Dataset {
    manifest: DatasetManifest,
    samples: Vec<SimSample>,
}

fn load_dataset(dir: &Path) -> Result<Dataset, CliError> {
    let manifest: DatasetManifest = read_json(&dir.join("manifest.json"))
        .map_err(|e| CliError::Input(format!("not a dataset directory ({e})")))?;
    if manifest.format != DATASET_FORMAT {
        return Err(CliError::Input(format!(
            "unknown dataset format {}",
            manifest.format
        )));
    }
    let dirs = list_samples(dir)?;
    if dirs.len() != manifest.n_samples {
        return Err(CliError::Input(format!(
            "dataset lists {} samples but {} directories exist",
            manifest.n_samples,
            dirs.len()
        )));
    }
    let samples = dirs
        .iter()
        .map(|d| Ok(stored_to_sim(read_sample(d)?)?))
        .collect::<Result<Vec<_>, CliError>>()?;
    Ok(Dataset { manifest, samples })
}

fn selected(n: usize, index: Option<usize>) -> Result<Vec<usize>, CliError> {
    match index {
        Some(i) if i < n => Ok(vec![i]),
        Some(i) => Err(CliError::Input(format!(
            "sample index {i} out of range (dataset has {n})"
        ))),
        None => Ok((0..n).collect()),
    }
}

pub fn simulate(cfg: &RunConfig, out: &Path, force: bool) -> Result<Value, CliError> {
    prepare_out(out, force)?;
    let d = &cfg.dataset;
    let mask = d.mask()?;
    for i in 0..d.n_samples {
        let s = simulate_sample(d, &mask, i)?;
        write_sample(&out.join(sample_dir_name(i)), &s)?;
    }
    let manifest = DatasetManifest {
        format: DATASET_FORMAT.into(),
        config_hash: cfg.hash(),
        n_samples: d.n_samples,
        height: d.height,
        width: d.width,
        coils: d.coils,
        config: cfg.clone(),
    };
    write_json(&out.join("manifest.json"), &manifest)?;
    cfg.save(&out.join("config.json"))?;
    Ok(json!({
        "command": "simulate",
        "config_hash": manifest.config_hash,
        "n_samples": d.n_samples,
        "acquired_columns": mask.count(),
        "out": out,
    }))
}

fn train_set(cfg: &RunConfig, data: &Dataset) -> Result<TrainSet, CliError> {
    Ok(TrainSet::from_samples(
        &data.samples,
        cfg.train.nullspace_learning,
    )?)
}

fn fresh_model(cfg: &RunConfig, data: &Dataset) -> Result<FlowModel, CliError> {
    let m = &data.manifest;
    Ok(FlowModel::new(cfg.model.flow_spec(
        2 * m.coils,
        m.height,
        m.width,
    )?)?)
}

fn model_info(cfg: &RunConfig, data: &Dataset, stage: &str, extra: Value) -> Value {
    json!({
        "stage": stage,
        "nullspace_learning": cfg.train.nullspace_learning,
        "dataset_hash": data.manifest.config_hash,
        "details": extra,
    })
}

pub fn pretrain(cfg: &RunConfig, data: &Path, out: &Path, force: bool) -> Result<Value, CliError> {
    let data = load_dataset(data)?;
    let set = train_set(cfg, &data)?;
    prepare_out(out, force)?;
    let mut model = fresh_model(cfg, &data)?;
    let report = pretrain_condnet(&mut model, &set, &train_config(cfg))?;
    let info = model_info(cfg, &data, "pretrain", serde_json::to_value(&report)?);
    save_model(&model, out, Some(&cfg.hash()), info)?;
    Ok(json!({
        "command": "pretrain",
        "config_hash": cfg.hash(),
        "initial_val_mse": report.initial_val_mse,
        "final_val_mse": report.final_val_mse,
        "out": out,
    }))
}

fn state_dir(out: &Path) -> PathBuf {
    out.join("state")
}

fn append_log(path: &Path, csv: &str, with_header: bool) -> Result<(), CliError> {
    let mut f = OpenOptions::new().create(true).append(true).open(path)?;
    let body = if with_header {
        csv
    } else {
        csv.split_once('\n').map_or("", |(_, rest)| rest)
    };
    f.write_all(body.as_bytes())?;
    Ok(())
}

pub fn train(
    cfg: &RunConfig,
    data: &Path,
    out: &Path,
    init: Option<&Path>,
    resume: bool,
    force: bool,
) -> Result<Value, CliError> {
    let data = load_dataset(data)?;
    let set = train_set(cfg, &data)?;
    let tcfg = train_config(cfg);
    let (mut model, state, pretrain_report) = if resume {
        let (mut model, manifest) = load_model(out)?;
        check_hash(&manifest, cfg)?;
        let sd = state_dir(out);
        let current = read_params(&sd.join("current.fnt"), &manifest.params)?;
        *model.params_mut() = current;
        (model, Some(JointState::load(&sd)?), Value::Null)
    } else {
        prepare_out(out, force)?;
        match init {
            Some(dir) => {
                let (mut m, _) = load_model(dir)?;
                if m.condnet().is_some_and(|c| c.has_head()) {
                    m.remove_cond_head()?;
                }
                (m, None, Value::Null)
            }
            None => {
                let mut m = fresh_model(cfg, &data)?;
                let report = if cfg.train.skip_pretrain {
                    m.remove_cond_head()?;
                    Value::Null
                } else {
                    serde_json::to_value(pretrain_condnet(&mut m, &set, &tcfg)?)?
                };
                (m, None, report)
            }
        }
    };
    let log_path = out.join("train_log.csv");
    let fresh_log = !log_path.exists();
    let hash = cfg.hash();
    let mut trainer = JointTrainer::new(&mut model, &set, &tcfg, state)?;
    let mut failure = None;
    while trainer.state().epoch < tcfg.joint_epochs {
        match trainer.run_epoch() {
            Ok(_) => {
                let sd = state_dir(out);
                trainer.state().save(&sd)?;
                write_params(&sd.join("current.fnt"), trainer.model().params())?;
            }
            Err(e) => {
                failure = Some(e);
                break;
            }
        }
    }
    let epochs = trainer.state().epoch;
    let best_val = trainer.state().best_val;
    let (_, log) = trainer.finish();
    append_log(&log_path, &log.to_csv(), fresh_log)?;
    let info = model_info(
        cfg,
        &data,
        "joint",
        json!({ "epochs": epochs, "best_val_nats": num(best_val), "pretrain": pretrain_report }),
    );
    // The model now holds the best (last-good) parameters.
    save_model(&model, out, Some(&hash), info)?;
    if let Some(e) = failure {
        return Err(e.into());
    }
    let last = log.records.last();
    Ok(json!({
        "command": "train",
        "config_hash": hash,
        "epochs": epochs,
        "final_train_bpd": last.map(|r| num(r.train_bpd)),
        "final_val_bpd": last.map(|r| num(r.val_bpd)),
        "best_val_bpd": num(best_val / (model.latent_dim() as f64 * std::f64::consts::LN_2)),
        "out": out,
    }))
}

fn check_hash(manifest: &Manifest, cfg: &RunConfig) -> Result<(), CliError> {
    match &manifest.config_hash {
        Some(h) if *h != cfg.hash() => Err(CliError::Mixed(format!(
            "checkpoint was written under config {h}, current config is {}",
            cfg.hash()
        ))),
        _ => Ok(()),
    }
}

fn nullspace_flag(manifest: &Manifest, cfg: &RunConfig) -> bool {
    manifest
        .info
        .get("nullspace_learning")
        .and_then(Value::as_bool)
        .unwrap_or(cfg.train.nullspace_learning)
}

fn sample_seed(cfg: &RunConfig, index: usize) -> u64 {
    cfg.eval
        .sample_seed
        .wrapping_mul(1_000_003)
        .wrapping_add(index as u64)
}

fn save_image(dir: &Path, stem: &str, img: &CombinedImage) -> Result<(), CliError> {
    let path = dir.join(format!("{stem}.fnt"));
    let mut w = BufWriter::new(File::create(path)?);
    match img {
        CombinedImage::Complex(c) => write_complex(&mut w, c, DType::Complex64)?,
        CombinedImage::Magnitude(m) => write_real(&mut w, m, DType::Real32)?,
    }
    w.flush()?;
    write_pgm(&dir.join(format!("{stem}.pgm")), &img.magnitude())?;
    Ok(())
}

fn write_out_manifest(out: &Path, kind: &str, cfg: &RunConfig, data: &Dataset, ckpt: &Manifest) -> Result<(), CliError> {
    write_json(
        &out.join("manifest.json"),
        &json!({
            "kind": kind,
            "config_hash": cfg.hash(),
            "dataset_hash": data.manifest.config_hash,
            "checkpoint_hash": ckpt.config_hash,
        }),
    )
}

#[allow(clippy::too_many_arguments)]
pub fn sample(
    cfg: &RunConfig,
    checkpoint: &Path,
    data: &Path,
    out: &Path,
    index: Option<usize>,
    raw: bool,
    force: bool,
) -> Result<Value, CliError> {
    let (model, manifest) = load_model(checkpoint)?;
    let data = load_dataset(data)?;
    let idx = selected(data.samples.len(), index)?;
    prepare_out(out, force)?;
    let sc = SampleConfig {
        data_consistency: cfg.train.data_consistency && !raw,
        nullspace_learning: nullspace_flag(&manifest, cfg),
        normalize: true,
        workers: workers(cfg),
    };
    let p = cfg.eval.posterior_samples;
    let mut worst_residual: f64 = 0.0;
    for &i in &idx {
        let s = &data.samples[i];
        let seed = sample_seed(cfg, i);
        let b = sample_posterior(&model, &s.y, &s.mask, p, seed, &sc)?;
        let dir = out.join(sample_dir_name(i));
        fs::create_dir_all(&dir)?;
        let mut w = BufWriter::new(File::create(dir.join("samples.fnt"))?);
        for x in &b.samples {
            write_complex(&mut w, x.data(), DType::Complex64)?;
        }
        w.flush()?;
        let mean = posterior_mean(&b, cfg.eval.combine, Some(&s.maps))?;
        save_image(&dir, "mean", &mean)?;
        for (k, x) in b.samples.iter().enumerate() {
            let im = combine(x, cfg.eval.combine, Some(&s.maps))?;
            write_pgm(&dir.join(format!("sample_{k}.pgm")), &im.magnitude())?;
        }
        if sc.data_consistency {
            worst_residual = b.residuals.iter().fold(worst_residual, |m, &r| m.max(r));
        }
        write_json(
            &dir.join("sidecar.json"),
            &json!({
                "config_hash": cfg.hash(),
                "checkpoint_hash": manifest.config_hash,
                "dataset_hash": data.manifest.config_hash,
                "index": i,
                "seed": seed,
                "latent_streams": (0..p).collect::<Vec<_>>(),
                "data_consistency": sc.data_consistency,
                "raw_generator_output": !sc.data_consistency,
                "nullspace_learning": sc.nullspace_learning,
                "normalization_scale": b.scale,
                "log_density_bpd": b.log_density_bpd,
                "consistency_residuals": b.residuals,
            }),
        )?;
    }
    write_out_manifest(out, "samples", cfg, &data, &manifest)?;
    Ok(json!({
        "command": "sample",
        "config_hash": cfg.hash(),
        "measurements": idx.len(),
        "samples_per_measurement": p,
        "data_consistency": sc.data_consistency,
        "max_consistency_residual": worst_residual,
        "out": out,
    }))
}

#[allow(clippy::too_many_arguments)]
pub fn map(
    cfg: &RunConfig,
    checkpoint: &Path,
    data: &Path,
    out: &Path,
    index: Option<usize>,
    zero_init: bool,
    force: bool,
) -> Result<Value, CliError> {
    let (model, manifest) = load_model(checkpoint)?;
    let data = load_dataset(data)?;
    let idx = selected(data.samples.len(), index)?;
    prepare_out(out, force)?;
    let sc = SampleConfig {
        data_consistency: true,
        nullspace_learning: nullspace_flag(&manifest, cfg),
        normalize: true,
        workers: 1,
    };
    let mut densities = Vec::new();
    for &i in &idx {
        let s = &data.samples[i];
        let init = if zero_init {
            MapInit::Zeros
        } else {
            MapInit::Sample {
                seed: sample_seed(cfg, i),
            }
        };
        let mc = MapConfig {
            iters: cfg.eval.map_iters,
            lr: cfg.eval.map_lr,
            init: init.clone(),
        };
        let r = map_estimate(&model, &s.y, &s.mask, &mc, &sc)?;
        let dir = out.join(sample_dir_name(i));
        fs::create_dir_all(&dir)?;
        let mut w = BufWriter::new(File::create(dir.join("estimate.fnt"))?);
        write_complex(&mut w, r.estimate.data(), DType::Complex64)?;
        w.flush()?;
        let im = combine(&r.estimate, cfg.eval.combine, Some(&s.maps))?;
        save_image(&dir, "map", &im)?;
        write_json(
            &dir.join("map.json"),
            &json!({
                "config_hash": cfg.hash(),
                "checkpoint_hash": manifest.config_hash,
                "dataset_hash": data.manifest.config_hash,
                "index": i,
                "init": if zero_init { json!("zeros") } else { json!({ "posterior_sample_seed": sample_seed(cfg, i) }) },
                "iters": mc.iters,
                "lr": mc.lr,
                "best_iter": r.best_iter,
                "log_density_bpd": r.log_density_bpd,
                "trace_bpd": r.trace,
                "aborted": r.aborted,
            }),
        )?;
        densities.push(r.log_density_bpd);
    }
    write_out_manifest(out, "map", cfg, &data, &manifest)?;
    Ok(json!({
        "command": "map",
        "config_hash": cfg.hash(),
        "measurements": idx.len(),
        "log_density_bpd": densities,
        "out": out,
    }))
}

/// Estimate image from a stored record: a coil stack is SENSE-combined, a
/// 2-D complex image is used as is, a real image is a magnitude.
fn load_estimate(path: &Path, s: &SimSample) -> Result<CombinedImage, CliError> {
    match load(path)? {
        StoredTensor::Complex(c) if c.shape().len() == 3 => {
            let stack = CoilStack::new(c, flownull::mri::StackRole::Estimate)?;
            Ok(CombinedImage::Complex(coil_combine_sense(&stack, &s.maps)?))
        }
        StoredTensor::Complex(c) => Ok(CombinedImage::Complex(c)),
        StoredTensor::Real(r) => Ok(CombinedImage::Magnitude(r)),
    }
}

fn hashes_in(dir: &Path) -> Result<BTreeSet<String>, CliError> {
    let mut out = BTreeSet::new();
    let manifest = dir.join("manifest.json");
    if manifest.exists() {
        let v: Value = read_json(&manifest)?;
        if let Some(h) = v.get("config_hash").and_then(Value::as_str) {
            out.insert(h.to_owned());
        }
    }
    for entry in list_sample_dirs(dir)? {
        for name in ["sidecar.json", "map.json"] {
            let p = entry.join(name);
            if p.exists() {
                let v: Value = read_json(&p)?;
                if let Some(h) = v.get("config_hash").and_then(Value::as_str) {
                    out.insert(h.to_owned());
                }
            }
        }
    }
    Ok(out)
}

fn list_sample_dirs(dir: &Path) -> Result<Vec<PathBuf>, CliError> {
    let mut v: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.is_dir()
                && p.file_name()
                    .and_then(|n| n.to_str())
                    .is_some_and(|n| n.starts_with("sample_"))
        })
        .collect();
    v.sort();
    Ok(v)
}

fn magnitude_of(c: &ComplexTensor) -> Tensor {
    Tensor::new(c.shape().to_vec(), c.data().iter().map(|v| v.norm()).collect()).expect("same length")
}

pub fn eval(
    data: &Path,
    estimates: &Path,
    file: &str,
    out: &Path,
    allow_mixed: bool,
    force: bool,
) -> Result<Value, CliError> {
    let ds = load_dataset(data)?;
    let mut hashes = hashes_in(estimates)?;
    hashes.insert(ds.manifest.config_hash.clone());
    if hashes.len() > 1 && !allow_mixed {
        return Err(CliError::Mixed(format!(
            "inputs come from different configurations {hashes:?} (use --allow-mixed)"
        )));
    }
    prepare_out(out, force)?;
    let mut csv = String::from("index,psnr,cpsnr,ssim,zero_filled_psnr\n");
    let mut rows = Vec::new();
    for (i, s) in ds.samples.iter().enumerate() {
        let path = estimates.join(sample_dir_name(i)).join(file);
        if !path.exists() {
            continue;
        }
        let est = load_estimate(&path, s)?;
        let truth = coil_combine_sense(&s.truth, &s.maps)?;
        let truth_mag = magnitude_of(&truth);
        let est_mag = est.magnitude();
        let p = psnr(&est_mag, &truth_mag)?;
        let cp = match &est {
            CombinedImage::Complex(c) => cpsnr(c, &truth)?,
            CombinedImage::Magnitude(_) => f64::NAN,
        };
        let ss = ssim(&est_mag, &truth_mag).unwrap_or(f64::NAN);
        let zf = psnr(&magnitude_of(&coil_combine_sense(&s.y, &s.maps)?), &truth_mag)?;
        let _ = writeln!(csv, "{i},{p},{cp},{ss},{zf}");
        rows.push([p, cp, ss, zf]);
    }
    if rows.is_empty() {
        return Err(CliError::Input(format!(
            "no {file} estimates found under {}",
            estimates.display()
        )));
    }
    fs::write(out.join("metrics.csv"), &csv)?;
    let mean = |k: usize| rows.iter().map(|r| r[k]).sum::<f64>() / rows.len() as f64;
    let summary = json!({
        "command": "eval",
        "config_hashes": hashes,
        "images": rows.len(),
        "mean_psnr": num(mean(0)),
        "mean_cpsnr": num(mean(1)),
        "mean_ssim": num(mean(2)),
        "mean_zero_filled_psnr": num(mean(3)),
    });
    write_json(&out.join("summary.json"), &summary)?;
    Ok(summary)
}

fn flatten(c: &ComplexTensor) -> Vec<f64> {
    c.data().iter().flat_map(|v| [v.re, v.im]).collect()
}

pub fn gaincurve(
    cfg: &RunConfig,
    checkpoint: &Path,
    data: &Path,
    out: &Path,
    force: bool,
) -> Result<Value, CliError> {
    let (model, manifest) = load_model(checkpoint)?;
    let ds = load_dataset(data)?;
    prepare_out(out, force)?;
    let sc = SampleConfig {
        data_consistency: cfg.train.data_consistency,
        nullspace_learning: nullspace_flag(&manifest, cfg),
        normalize: true,
        workers: workers(cfg),
    };
    let pmax = *cfg.eval.gain_p.last().expect("validated");
    let n = cfg.eval.gain_trials.min(ds.samples.len());
    let mut trials = Vec::with_capacity(n);
    for (i, s) in ds.samples.iter().take(n).enumerate() {
        let b = sample_posterior(&model, &s.y, &s.mask, pmax, sample_seed(cfg, i), &sc)?;
        let samples = b
            .samples
            .iter()
            .map(|x| Ok(flatten(&coil_combine_sense(x, &s.maps)?)))
            .collect::<Result<Vec<_>, CliError>>()?;
        let truth = flatten(&coil_combine_sense(&s.truth, &s.maps)?);
        trials.push(GainTrial {
            samples,
            reference: GainReference::Truth(truth),
        });
    }
    let curve = gain_curve(&trials, &cfg.eval.gain_p)?;
    fs::write(out.join("gain.csv"), curve.to_csv())?;
    write_json(
        &out.join("gain.json"),
        &json!({ "config_hash": cfg.hash(), "curve": curve }),
    )?;
    Ok(json!({
        "command": "gaincurve",
        "config_hash": cfg.hash(),
        "trials": n,
        "p": curve.p,
        "empirical_db": curve.empirical_db,
        "theory_db": curve.theory_db,
        "out": out,
    }))
}
