//! Two-stage optimization: conditioning-network pretraining by MSE, then
//! joint maximum-likelihood training of the flow and conditioning network.

pub mod data;
pub mod joint;
pub mod pretrain;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::{CondNetSpec, FlowSpec};

pub use data::{split_indices, TrainPair, TrainSet};
pub use joint::{
    nll_and_grads, nll_loss, train_joint, EpochRecord, JointState, JointTrainer, TrainLog,
};
pub use pretrain::{pretrain_condnet, PretrainReport};

/// Optimization settings for both stages.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub pretrain_epochs: usize,
    pub joint_epochs: usize,
    pub batch_size: usize,
    pub pretrain_lr: f64,
    pub joint_lr: f64,
    pub seed: u64,
    pub val_fraction: f64,
    /// Train on nullspace components instead of full images.
    pub nullspace_learning: bool,
    /// Apply hard data consistency when sampling.
    pub data_consistency: bool,
    /// Skip conditioning-network pretraining.
    pub skip_pretrain: bool,
    /// Standard deviation of the measured-space dither added to targets.
    pub dither_sd: f64,
    /// Examples used for the data-dependent actnorm initialization.
    pub init_batch: usize,
    /// Gradient worker threads per batch.
    pub workers: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            pretrain_epochs: 10,
            joint_epochs: 30,
            batch_size: 8,
            pretrain_lr: 3e-3,
            joint_lr: 5e-4,
            seed: 0,
            val_fraction: 0.1,
            nullspace_learning: true,
            data_consistency: true,
            skip_pretrain: false,
            dither_sd: 0.01,
            init_batch: 64,
            workers: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.workers == 0 || self.init_batch == 0 {
            return Err(Error::InvalidParam(
                "batch sizes and workers must be positive".into(),
            ));
        }
        if !(self.pretrain_lr > 0.0 && self.joint_lr > 0.0) {
            return Err(Error::InvalidParam(
                "learning rates must be positive".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.val_fraction) || !(self.dither_sd >= 0.0) {
            return Err(Error::InvalidParam(
                "val_fraction must be in [0, 1) and dither_sd >= 0".into(),
            ));
        }
        Ok(())
    }
}

/// Size preset for the flow and conditioning network.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    #[default]
    Desk,
    Paper,
}

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub levels: usize,
    pub steps: usize,
    pub hidden: usize,
    pub cond_base: usize,
    pub cond_pools: usize,
    pub tap_width: usize,
    pub seed: u64,
}

impl ModelConfig {
    pub fn preset(p: Preset) -> Self {
        match p {
            Preset::Desk => Self {
                levels: 3,
                steps: 4,
                hidden: 64,
                cond_base: 32,
                cond_pools: 2,
                tap_width: 16,
                seed: 0,
            },
            Preset::Paper => Self {
                levels: 3,
                steps: 20,
                hidden: 64,
                cond_base: 32,
                cond_pools: 2,
                tap_width: 32,
                seed: 0,
            },
        }
    }

    /// Flow spec for `channels x height x width` inputs.
    pub fn flow_spec(&self, channels: usize, height: usize, width: usize) -> Result<FlowSpec> {
        FlowSpec::multiscale(
            channels,
            height,
            width,
            self.levels,
            self.steps,
            self.hidden,
            Some(CondNetSpec {
                in_channels: channels,
                base: self.cond_base,
                pools: self.cond_pools,
                levels: self.levels,
                tap_width: self.tap_width,
            }),
            self.seed,
        )
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::preset(Preset::Desk)
    }
}

#[cfg(test)]
pub(crate) mod fixtures {
    use super::*;
    use crate::flow::FlowModel;
    use crate::mri::dataset::{simulate, SimConfig};

    pub(crate) fn tiny_set(n: usize) -> TrainSet {
        let cfg = SimConfig {
            height: 8,
            width: 8,
            coils: 1,
            acs: 2,
            n_samples: n,
            ..SimConfig::default()
        };
        TrainSet::from_samples(&simulate(&cfg).unwrap(), true).unwrap()
    }

    pub(crate) fn tiny_model() -> FlowModel {
        let m = ModelConfig {
            levels: 2,
            steps: 1,
            hidden: 6,
            cond_base: 4,
            cond_pools: 1,
            tap_width: 3,
            seed: 5,
        };
        FlowModel::new(m.flow_spec(2, 8, 8).unwrap()).unwrap()
    }
}
