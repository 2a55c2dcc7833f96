use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::{FlowModel, Pid};
use crate::num::adam::{AdamConfig, AdamState};
use crate::num::tape::Tape;
use crate::num::tensor::Tensor;
use crate::train::data::{split_indices, stream, TrainSet};
use crate::train::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    pub initial_val_mse: f64,
    pub final_val_mse: f64,
    pub epochs: usize,
    pub train_mse: Vec<f64>,
}

// Mean squared error of the head prediction over all real channels.
fn mse(
    model: &FlowModel,
    y: &Tensor,
    target: &Tensor,
    ids: Option<&[Pid]>,
) -> Result<(f64, Vec<Tensor>)> {
    let cond = model
        .condnet()
        .ok_or_else(|| Error::InvalidParam("model has no conditioning network".into()))?;
    let mut tape = Tape::new();
    let bound = model.params().bind(&mut tape);
    let yv = tape.leaf(y.clone());
    let tv = tape.leaf(target.clone());
    let pred = cond.head_output(&mut tape, &bound, yv)?;
    let diff = tape.sub(pred, tv);
    let sq = tape.square(diff);
    let loss = tape.mean(sq);
    let value = tape.value(loss).data()[0];
    let Some(ids) = ids else {
        if !value.is_finite() {
            return Err(Error::Poisoned { op: "mse" });
        }
        return Ok((value, Vec::new()));
    };
    let mut g = tape.backward(loss)?;
    Ok((value, ids.iter().map(|&i| g.take(bound.var(i))).collect()))
}

fn eval_mse(model: &FlowModel, data: &TrainSet, idx: &[usize]) -> Result<f64> {
    let mut total = 0.0;
    for &i in idx {
        let (y, t) = data.batch(&[i], 0.0, &mut stream(0, 0, 0))?;
        total += mse(model, &y, &t, None)?.0;
    }
    Ok(total / idx.len().max(1) as f64)
}

/// Fit the conditioning trunk (plus its temporary `1x1` head) to predict the
/// flow targets from `y`, then remove the head.
pub fn pretrain_condnet(
    model: &mut FlowModel,
    data: &TrainSet,
    cfg: &TrainConfig,
) -> Result<PretrainReport> {
    cfg.validate()?;
    if !model.condnet().is_some_and(|c| c.has_head()) {
        return Err(Error::InvalidParam(
            "pretraining needs a conditioning network with its head attached".into(),
        ));
    }
    let (train_idx, val_idx) = split_indices(data.len(), cfg.val_fraction, cfg.seed);
    let val_idx = if val_idx.is_empty() {
        train_idx.clone()
    } else {
        val_idx
    };
    let ids = model.params().ids_with_prefix("cond.");
    let shapes: Vec<&[usize]> = ids.iter().map(|&i| model.params().get(i).shape()).collect();
    let mut adam = AdamState::new(AdamConfig::with_lr(cfg.pretrain_lr), &shapes)?;
    let initial = eval_mse(model, data, &val_idx)?;
    let mut train_mse = Vec::new();
    for epoch in 0..cfg.pretrain_epochs {
        let mut order = train_idx.clone();
        order.shuffle(&mut stream(cfg.seed, 5, epoch as u64));
        let mut acc = 0.0;
        let mut count = 0;
        for chunk in order.chunks(cfg.batch_size) {
            let (y, t) = data.batch(chunk, 0.0, &mut stream(0, 0, 0))?;
            let (loss, grads) = match mse(model, &y, &t, Some(&ids)) {
                Ok(r) => r,
                Err(Error::Poisoned { op }) => {
                    return Err(Error::Diverged {
                        epoch: epoch + 1,
                        reason: format!("non-finite value in {op} during pretraining"),
                    })
                }
                Err(e) => return Err(e),
            };
            let store = model.params_mut();
            let mut refs: Vec<&mut Tensor> = store
                .values_mut()
                .iter_mut()
                .enumerate()
                .filter(|(i, _)| ids.binary_search(i).is_ok())
                .map(|(_, t)| t)
                .collect();
            adam.step(&mut refs, &grads)?;
            acc += loss;
            count += 1;
        }
        train_mse.push(acc / count.max(1) as f64);
    }
    let final_val = eval_mse(model, data, &val_idx)?;
    if !final_val.is_finite() {
        return Err(Error::Diverged {
            epoch: cfg.pretrain_epochs,
            reason: "validation MSE is not finite".into(),
        });
    }
    model.remove_cond_head()?;
    Ok(PretrainReport {
        initial_val_mse: initial,
        final_val_mse: final_val,
        epochs: cfg.pretrain_epochs,
        train_mse,
    })
}
