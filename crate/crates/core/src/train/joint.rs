use std::f64::consts::LN_2;
use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::FlowModel;
use crate::num::adam::{AdamConfig, AdamState};
use crate::num::io::{read_record, write_real, DType};
use crate::num::tape::Tape;
use crate::num::tensor::Tensor;
use crate::train::data::{split_indices, stream, TrainSet};
use crate::train::TrainConfig;

fn chunk_nll(model: &FlowModel, y: &Tensor, v: &Tensor, grads: bool) -> Result<(f64, Vec<Tensor>)> {
    let mut tape = Tape::new();
    let bound = model.params().bind(&mut tape);
    let yv = tape.leaf(y.clone());
    let vv = tape.leaf(v.clone());
    let lp = model.log_prob_graph(&mut tape, &bound, vv, Some(yv))?;
    let total = tape.sum(lp);
    let loss = tape.neg(total);
    let value = tape.value(loss).data()[0];
    if !grads {
        if let Some(op) = tape.first_non_finite(loss) {
            return Err(Error::Poisoned { op });
        }
        return Ok((value, Vec::new()));
    }
    let mut g = tape.backward(loss)?;
    Ok((value, bound.vars().iter().map(|&p| g.take(p)).collect()))
}

fn split_batch(n: usize, workers: usize) -> Vec<(usize, usize)> {
    let w = workers.clamp(1, n.max(1));
    let per = n.div_ceil(w);
    (0..w)
        .map(|i| (i * per, ((i + 1) * per).min(n)))
        .filter(|(a, b)| a < b)
        .collect()
}

fn batched_nll(
    model: &FlowModel,
    y: &Tensor,
    v: &Tensor,
    workers: usize,
    grads: bool,
) -> Result<(f64, Vec<Tensor>)> {
    let n = y.batch();
    if n == 0 || v.batch() != n {
        return Err(Error::Shape(format!("batch sizes {} and {}", n, v.batch())));
    }
    let parts = split_batch(n, workers);
    let results: Vec<Result<(f64, Vec<Tensor>)>> = if parts.len() == 1 {
        vec![chunk_nll(model, y, v, grads)]
    } else {
        std::thread::scope(|s| {
            let handles: Vec<_> = parts
                .iter()
                .map(|&(a, b)| {
                    let (yc, vc) = (y.batch_slice(a, b), v.batch_slice(a, b));
                    s.spawn(move || chunk_nll(model, &yc, &vc, grads))
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("gradient worker panicked"))
                .collect()
        })
    };
    // Reduce in a fixed order so the result only depends on `workers`.
    let mut total = 0.0;
    let mut acc: Vec<Tensor> = Vec::new();
    for r in results {
        let (l, g) = r?;
        total += l;
        if acc.is_empty() {
            acc = g;
        } else {
            for (a, b) in acc.iter_mut().zip(&g) {
                a.add_assign(b);
            }
        }
    }
    let inv = 1.0 / n as f64;
    Ok((
        total * inv,
        acc.into_iter().map(|g| g.map(|x| x * inv)).collect(),
    ))
}

/// Mean negative log-likelihood (nats per example) of targets `v` given
/// conditioning inputs `y`, both `[B, 2C, H, W]`.
pub fn nll_loss(model: &FlowModel, y: &Tensor, v: &Tensor) -> Result<f64> {
    let (l, _) = batched_nll(model, y, v, 1, false)?;
    if !l.is_finite() {
        return Err(Error::Poisoned { op: "nll" });
    }
    Ok(l)
}

/// [`nll_loss`] and its gradient with respect to every parameter, in
/// parameter-store order.
pub fn nll_and_grads(
    model: &FlowModel,
    y: &Tensor,
    v: &Tensor,
    workers: usize,
) -> Result<(f64, Vec<Tensor>)> {
    batched_nll(model, y, v, workers, true)
}

/// Per-epoch summary; the CSV keeps the first four columns.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_bpd: f64,
    pub val_bpd: f64,
    pub wall_seconds: f64,
    #[serde(skip)]
    pub batch_losses: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub records: Vec<EpochRecord>,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,train_bpd,val_bpd,wall_seconds\n");
        for r in &self.records {
            let _ = writeln!(
                s,
                "{},{:.6},{:.6},{:.3}",
                r.epoch, r.train_bpd, r.val_bpd, r.wall_seconds
            );
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv())?;
        Ok(())
    }
}

/// Everything needed to continue joint training exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct JointState {
    pub adam: AdamState,
    /// Completed epochs.
    pub epoch: usize,
    pub best_val: f64,
    pub best_params: Vec<Tensor>,
}

#[derive(Serialize, Deserialize)]
struct StateMeta {
    epoch: usize,
    best_val: Option<f64>,
    step: u64,
    adam: AdamConfig,
}

fn write_tensors(path: &Path, ts: &[Tensor]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for t in ts {
        write_real(&mut w, t, DType::Real64)?;
    }
    w.flush()?;
    Ok(())
}

fn read_tensors(path: &Path) -> Result<Vec<Tensor>> {
    let mut r = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    while let Some(t) = read_record(&mut r)? {
        out.push(t.into_real()?);
    }
    Ok(out)
}

impl JointState {
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let meta = StateMeta {
            epoch: self.epoch,
            best_val: self.best_val.is_finite().then_some(self.best_val),
            step: self.adam.t,
            adam: self.adam.config,
        };
        fs::write(
            dir.join("train_state.json"),
            serde_json::to_string_pretty(&meta)?,
        )?;
        write_tensors(&dir.join("adam_m.fnt"), &self.adam.m)?;
        write_tensors(&dir.join("adam_v.fnt"), &self.adam.v)?;
        write_tensors(&dir.join("best_params.fnt"), &self.best_params)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let meta: StateMeta =
            serde_json::from_str(&fs::read_to_string(dir.join("train_state.json"))?)?;
        let m = read_tensors(&dir.join("adam_m.fnt"))?;
        let v = read_tensors(&dir.join("adam_v.fnt"))?;
        let best_params = read_tensors(&dir.join("best_params.fnt"))?;
        if m.len() != v.len() || m.len() != best_params.len() {
            return Err(Error::Format(
                "training state files disagree in length".into(),
            ));
        }
        Ok(Self {
            adam: AdamState {
                config: meta.adam,
                m,
                v,
                t: meta.step,
            },
            epoch: meta.epoch,
            best_val: meta.best_val.unwrap_or(f64::INFINITY),
            best_params,
        })
    }
}

/// Epoch-by-epoch joint NLL training with best-validation retention.
pub struct JointTrainer<'a> {
    model: &'a mut FlowModel,
    data: &'a TrainSet,
    cfg: &'a TrainConfig,
    train_idx: Vec<usize>,
    val_idx: Vec<usize>,
    state: JointState,
    log: TrainLog,
    started: Instant,
}

impl<'a> JointTrainer<'a> {
    pub fn new(
        model: &'a mut FlowModel,
        data: &'a TrainSet,
        cfg: &'a TrainConfig,
        resume: Option<JointState>,
    ) -> Result<Self> {
        cfg.validate()?;
        if cfg.nullspace_learning {
            data.check_nullspace_targets()?;
        }
        let (train_idx, val_idx) = split_indices(data.len(), cfg.val_fraction, cfg.seed);
        if train_idx.is_empty() {
            return Err(Error::Empty("no training examples after the split".into()));
        }
        if !model.actnorm_initialized() {
            let k = cfg.init_batch.min(train_idx.len());
            let (y, v) = data.batch(&train_idx[..k], cfg.dither_sd, &mut stream(cfg.seed, 1, 0))?;
            model.initialize_actnorm(&v, Some(&y))?;
        }
        let state = match resume {
            Some(s) => {
                if s.adam.m.len() != model.params().len() {
                    return Err(Error::Mismatch(format!(
                        "resume state tracks {} tensors, model has {}",
                        s.adam.m.len(),
                        model.params().len()
                    )));
                }
                s
            }
            None => {
                let shapes: Vec<&[usize]> =
                    model.params().values().iter().map(|t| t.shape()).collect();
                JointState {
                    adam: AdamState::new(AdamConfig::with_lr(cfg.joint_lr), &shapes)?,
                    epoch: 0,
                    best_val: f64::INFINITY,
                    best_params: model.params().values().to_vec(),
                }
            }
        };
        Ok(Self {
            model,
            data,
            cfg,
            train_idx,
            val_idx,
            state,
            log: TrainLog::default(),
            started: Instant::now(),
        })
    }

    pub fn state(&self) -> &JointState {
        &self.state
    }

    pub fn log(&self) -> &TrainLog {
        &self.log
    }

    pub fn model(&self) -> &FlowModel {
        self.model
    }

    fn bpd(&self, nats: f64) -> f64 {
        nats / (self.model.latent_dim() as f64 * LN_2)
    }

    /// Mean validation NLL in nats with a fixed dither per example (falls
    /// back to the training examples when there is no validation split).
    pub fn validation_nll(&self) -> Result<f64> {
        let idx = if self.val_idx.is_empty() {
            &self.train_idx
        } else {
            &self.val_idx
        };
        let mut total = 0.0;
        for &i in idx {
            let (y, v) = self.data.batch(
                &[i],
                self.cfg.dither_sd,
                &mut stream(self.cfg.seed, 2, i as u64),
            )?;
            total += nll_loss(self.model, &y, &v)?;
        }
        Ok(total / idx.len() as f64)
    }

    fn restore_best(&mut self) {
        for (p, b) in self
            .model
            .params_mut()
            .values_mut()
            .iter_mut()
            .zip(&self.state.best_params)
        {
            *p = b.clone();
        }
    }

    fn diverged(&mut self, reason: String) -> Error {
        self.restore_best();
        Error::Diverged {
            epoch: self.state.epoch + 1,
            reason,
        }
    }

    pub fn run_epoch(&mut self) -> Result<EpochRecord> {
        let epoch = self.state.epoch;
        let mut order = self.train_idx.clone();
        order.shuffle(&mut stream(self.cfg.seed, 3, epoch as u64));
        let mut losses = Vec::new();
        for (b, chunk) in order.chunks(self.cfg.batch_size).enumerate() {
            let mut rng = stream(self.cfg.seed, 1000 + epoch as u64, b as u64);
            let (y, v) = self.data.batch(chunk, self.cfg.dither_sd, &mut rng)?;
            let (loss, grads) = match nll_and_grads(self.model, &y, &v, self.cfg.workers) {
                Ok(r) => r,
                Err(Error::Poisoned { op }) => {
                    return Err(self.diverged(format!("non-finite value in {op}")))
                }
                Err(e) => return Err(e),
            };
            if !loss.is_finite() {
                return Err(self.diverged(format!("loss {loss}")));
            }
            let mut refs: Vec<&mut Tensor> =
                self.model.params_mut().values_mut().iter_mut().collect();
            self.state.adam.step(&mut refs, &grads)?;
            if !self.model.params().all_finite() {
                return Err(self.diverged("non-finite parameters after update".into()));
            }
            losses.push(loss);
        }
        let val = match self.validation_nll() {
            Ok(v) if v.is_finite() => v,
            Ok(v) => return Err(self.diverged(format!("validation loss {v}"))),
            Err(Error::Poisoned { op }) => {
                return Err(self.diverged(format!("non-finite validation value in {op}")))
            }
            Err(e) => return Err(e),
        };
        self.state.epoch += 1;
        if val < self.state.best_val {
            self.state.best_val = val;
            self.state.best_params = self.model.params().values().to_vec();
        }
        let train = losses.iter().sum::<f64>() / losses.len().max(1) as f64;
        let rec = EpochRecord {
            epoch: self.state.epoch,
            train_bpd: self.bpd(train),
            val_bpd: self.bpd(val),
            wall_seconds: self.started.elapsed().as_secs_f64(),
            batch_losses: losses,
        };
        self.log.records.push(rec.clone());
        Ok(rec)
    }

    /// Run until `total_epochs` epochs have completed.
    pub fn run_until(&mut self, total_epochs: usize) -> Result<()> {
        while self.state.epoch < total_epochs {
            self.run_epoch()?;
        }
        Ok(())
    }

    /// Load the best validated parameters into the model.
    pub fn finish(mut self) -> (JointState, TrainLog) {
        self.restore_best();
        (self.state, self.log)
    }
}

/// Joint training for `cfg.joint_epochs` epochs; the model ends with the
/// parameters of the best validation epoch.
pub fn train_joint(
    model: &mut FlowModel,
    data: &TrainSet,
    cfg: &TrainConfig,
) -> Result<(TrainLog, JointState)> {
    let mut t = JointTrainer::new(model, data, cfg, None)?;
    t.run_until(cfg.joint_epochs)?;
    let (state, log) = t.finish();
    Ok((log, state))
}

#[cfg(test)]
mod tests {
    use rand::Rng;

    use super::*;
    use crate::flow::tests::randomize;
    use crate::flow::FlowSpec;
    use crate::mri::dataset::{simulate, SimConfig};
    use crate::train::fixtures::{tiny_model, tiny_set};

    fn doubled(t: &Tensor) -> Tensor {
        let mut shape = t.shape().to_vec();
        shape[0] *= 2;
        let data = [t.data(), t.data()].concat();
        Tensor::new(shape, data).unwrap()
    }

    #[test]
    fn identity_flow_loss_is_standard_normal_nll() {
        // Fresh couplings are the identity and the mixing is orthogonal.
        let model = FlowModel::new(FlowSpec::flat(2, 4, 4, 2, 4, 0)).unwrap();
        let q = 32.0;
        let n = 4000;
        let u = Tensor::randn(&[n, 2, 4, 4], &mut stream(1, 0, 0));
        let y = Tensor::zeros(&[n, 2, 4, 4]);
        let loss = nll_loss(&model, &y, &u).unwrap();
        let half_sq = 0.5 * u.sq_norm() / n as f64;
        let base = 0.5 * q * (2.0 * std::f64::consts::PI).ln();
        assert!((loss - (half_sq + base)).abs() < 1e-9);
        // E[||u||^2 / 2] = Q / 2, sampling sd 4 / sqrt(n).
        assert!((loss - (base + 0.5 * q)).abs() < 0.3, "{loss}");
    }

    #[test]
    fn doubling_the_batch_keeps_the_mean_loss() {
        let data = tiny_set(3);
        let model = tiny_model();
        let (y, v) = data.batch(&[0, 1, 2], 0.01, &mut stream(0, 1, 2)).unwrap();
        let (l1, g1) = nll_and_grads(&model, &y, &v, 1).unwrap();
        let (l2, g2) = nll_and_grads(&model, &doubled(&y), &doubled(&v), 2).unwrap();
        assert!((l1 - l2).abs() < 1e-9 * l1.abs().max(1.0));
        for (a, b) in g1.iter().zip(&g2) {
            assert!(a.zip_map(b, |x, y| x - y).max_abs() < 1e-9);
        }
    }

    #[test]
    fn two_pixel_toy_loss_decreases() {
        let mut model = FlowModel::new(FlowSpec::flat(2, 1, 1, 2, 8, 3)).unwrap();
        let mut r = stream(2, 0, 0);
        // Correlated, anisotropic 2-D Gaussian.
        let n = 256;
        let mut v = Tensor::randn(&[n, 2, 1, 1], &mut r);
        for k in 0..n {
            let d = v.data_mut();
            let (a, b) = (d[2 * k], d[2 * k + 1]);
            d[2 * k] = 3.0 * a;
            d[2 * k + 1] = 0.5 * b + a;
        }
        let y = Tensor::zeros(&[n, 2, 1, 1]);
        let shapes: Vec<Vec<usize>> = model
            .params()
            .values()
            .iter()
            .map(|t| t.shape().to_vec())
            .collect();
        let shape_refs: Vec<&[usize]> = shapes.iter().map(|s| s.as_slice()).collect();
        let mut adam = AdamState::new(AdamConfig::with_lr(1e-2), &shape_refs).unwrap();
        let (first, _) = nll_and_grads(&model, &y, &v, 1).unwrap();
        let mut last = first;
        for _ in 0..100 {
            let (l, g) = nll_and_grads(&model, &y, &v, 1).unwrap();
            last = l;
            let mut ps: Vec<&mut Tensor> = model.params_mut().values_mut().iter_mut().collect();
            adam.step(&mut ps, &g).unwrap();
        }
        assert!(last < first - 0.5, "{first} -> {last}");
    }

    #[test]
    fn full_image_targets_train() {
        let cfg = SimConfig {
            height: 8,
            width: 8,
            coils: 1,
            acs: 2,
            n_samples: 8,
            ..SimConfig::default()
        };
        let data = TrainSet::from_samples(&simulate(&cfg).unwrap(), false).unwrap();
        let mut model = tiny_model();
        model.remove_cond_head().unwrap();
        let tc = TrainConfig {
            joint_epochs: 2,
            batch_size: 4,
            nullspace_learning: false,
            ..TrainConfig::default()
        };
        let (log, _) = train_joint(&mut model, &data, &tc).unwrap();
        assert_eq!(log.records.len(), 2);
        assert!(log.records.iter().all(|r| r.val_bpd.is_finite()));
    }

    #[test]
    fn gradients_match_finite_differences() {
        let data = tiny_set(3);
        let mut model = tiny_model();
        randomize(&mut model, 4, 0.2);
        // Zero biases put ReLU inputs exactly on the kink over empty background.
        let mut r = stream(4, 0, 0);
        for i in 0..model.params().len() {
            let name = &model.params().names()[i];
            if [".b", ".b0", ".b1"].iter().any(|sfx| name.ends_with(sfx)) {
                for x in model.params_mut().get_mut(i).data_mut() {
                    *x += 0.05 * r.gen_range(-1.0..1.0);
                }
            }
        }
        let (y, v) = data.batch(&[0, 1, 2], 0.01, &mut stream(0, 9, 9)).unwrap();
        let (_, grads) = nll_and_grads(&model, &y, &v, 2).unwrap();
        let (_, g1) = nll_and_grads(&model, &y, &v, 1).unwrap();
        for (a, b) in grads.iter().zip(&g1) {
            assert!(a.zip_map(b, |x, y| x - y).max_abs() < 1e-9);
        }
        let h = 1e-5;
        let mut checked = 0;
        for pid in 0..model.params().len() {
            for k in [0, model.params().get(pid).len() / 2] {
                let mut mp = model.clone();
                mp.params_mut().get_mut(pid).data_mut()[k] += h;
                let mut mm = model.clone();
                mm.params_mut().get_mut(pid).data_mut()[k] -= h;
                let fd =
                    (nll_loss(&mp, &y, &v).unwrap() - nll_loss(&mm, &y, &v).unwrap()) / (2.0 * h);
                let an = grads[pid].data()[k];
                assert!(
                    (fd - an).abs() <= 1e-4 * an.abs().max(1.0),
                    "{} [{k}]: fd {fd} vs {an}",
                    model.params().names()[pid]
                );
                checked += 1;
            }
        }
        assert!(checked > 20);
    }

    #[test]
    fn training_lowers_validation_nll() {
        let data = tiny_set(12);
        let mut model = tiny_model();
        model.remove_cond_head().unwrap();
        let cfg = TrainConfig {
            joint_epochs: 6,
            batch_size: 4,
            joint_lr: 3e-3,
            val_fraction: 0.25,
            dither_sd: 0.05,
            ..TrainConfig::default()
        };
        let (log, state) = train_joint(&mut model, &data, &cfg).unwrap();
        assert_eq!(log.records.len(), 6);
        let first = log.records[0].val_bpd;
        let best = log
            .records
            .iter()
            .map(|r| r.val_bpd)
            .fold(f64::INFINITY, f64::min);
        assert!(best < first, "{first} -> {best}");
        assert_eq!(model.params().values(), &state.best_params[..]);
        let csv = log.to_csv();
        assert_eq!(csv.lines().count(), 7);
        assert!(csv.starts_with("epoch,train_bpd,val_bpd,wall_seconds"));
    }

    #[test]
    fn resume_reproduces_uninterrupted_run() {
        let data = tiny_set(8);
        let cfg = TrainConfig {
            batch_size: 3,
            joint_lr: 2e-3,
            val_fraction: 0.25,
            ..TrainConfig::default()
        };
        let mut a = tiny_model();
        let mut ta = JointTrainer::new(&mut a, &data, &cfg, None).unwrap();
        ta.run_until(3).unwrap();
        let full = ta
            .log()
            .records
            .iter()
            .map(|r| r.val_bpd)
            .collect::<Vec<_>>();
        let (sa, _) = ta.finish();

        let dir = tempfile::tempdir().unwrap();
        let mut b = tiny_model();
        let mut tb = JointTrainer::new(&mut b, &data, &cfg, None).unwrap();
        tb.run_until(1).unwrap();
        tb.state().save(dir.path()).unwrap();
        let params = tb.model().params().clone();
        drop(tb);
        let mut c = tiny_model();
        *c.params_mut() = params;
        c.set_actnorm_initialized(true);
        let resumed = JointState::load(dir.path()).unwrap();
        let mut tc = JointTrainer::new(&mut c, &data, &cfg, Some(resumed)).unwrap();
        tc.run_until(3).unwrap();
        let tail = tc
            .log()
            .records
            .iter()
            .map(|r| r.val_bpd)
            .collect::<Vec<_>>();
        assert_eq!(&full[1..], &tail[..]);
        let (sc, _) = tc.finish();
        assert_eq!(sa, sc);
    }

    #[test]
    fn divergence_restores_last_good_parameters() {
        let data = tiny_set(6);
        let mut model = tiny_model();
        let cfg = TrainConfig {
            batch_size: 2,
            joint_lr: 1e6,
            ..TrainConfig::default()
        };
        let mut t = JointTrainer::new(&mut model, &data, &cfg, None).unwrap();
        let good = t.state().best_params.clone();
        let mut err = None;
        for _ in 0..20 {
            if let Err(e) = t.run_epoch() {
                err = Some(e);
                break;
            }
        }
        match err {
            Some(Error::Diverged { .. }) => {}
            other => panic!("expected divergence, got {other:?}"),
        }
        let best = t.state().best_params.clone();
        assert!(t.model().params().all_finite());
        assert_eq!(t.model().params().values(), &best[..]);
        assert_eq!(good.len(), best.len());
    }
}
