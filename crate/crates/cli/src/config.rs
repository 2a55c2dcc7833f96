use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use flownull::mri::dataset::SimConfig;
use flownull::posterior::Combine;
use flownull::train::{ModelConfig, Preset, TrainConfig};

use crate::CliError;

/// Evaluation, sampling and MAP settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    /// Posterior samples per measurement.
    pub posterior_samples: usize,
    pub sample_seed: u64,
    pub combine: Combine,
    pub map_iters: usize,
    pub map_lr: f64,
    pub gain_p: Vec<usize>,
    /// Measurements used for the gain curve (capped by the dataset size).
    pub gain_trials: usize,
}

impl EvalConfig {
    pub fn preset(p: Preset) -> Self {
        let (map_iters, map_lr) = match p {
            Preset::Desk => (500, 1e-4),
            Preset::Paper => (5000, 1e-8),
        };
        Self {
            posterior_samples: 8,
            sample_seed: 0,
            combine: Combine::Sense,
            map_iters,
            map_lr,
            gain_p: vec![1, 2, 4, 8, 16, 32],
            gain_trials: 200,
        }
    }
}

/// Everything a run depends on. The canonical serialization (sorted keys,
/// pretty-printed) is what gets hashed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: SimConfig,
    pub preset: Preset,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn preset(p: Preset) -> Self {
        Self {
            dataset: SimConfig::default(),
            preset: p,
            model: ModelConfig::preset(p),
            train: TrainConfig::default(),
            eval: EvalConfig::preset(p),
        }
    }

    /// Switch to preset `p`, replacing the architecture and MAP settings.
    pub fn apply_preset(&mut self, p: Preset) {
        let seed = self.model.seed;
        self.preset = p;
        self.model = ModelConfig::preset(p);
        self.model.seed = seed;
        let e = EvalConfig::preset(p);
        self.eval.map_iters = e.map_iters;
        self.eval.map_lr = e.map_lr;
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Input(format!("cannot read config {}: {e}", path.display())))?;
        let cfg: Self = serde_json::from_str(&text)
            .map_err(|e| CliError::Input(format!("invalid config {}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.train.validate()?;
        self.dataset.mask()?;
        if self.eval.posterior_samples == 0 || self.eval.gain_trials == 0 {
            return Err(CliError::Input(
                "posterior_samples and gain_trials must be positive".into(),
            ));
        }
        if self.eval.gain_p.is_empty() || self.eval.gain_p.windows(2).any(|w| w[0] >= w[1]) {
            return Err(CliError::Input("gain_p must be ascending".into()));
        }
        Ok(())
    }

    /// Sorted-key pretty JSON with a trailing newline.
    pub fn canonical(&self) -> String {
        // serde_json's Value map is ordered by key.
        let value = serde_json::to_value(self).expect("config serializes");
        let mut s = serde_json::to_string_pretty(&value).expect("value serializes");
        s.push('\n');
        s
    }

    /// First 16 hex digits of the SHA-256 of [`RunConfig::canonical`].
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.canonical().as_bytes());
        hex::encode(digest)[..16].to_owned()
    }

    pub fn save(&self, path: &Path) -> Result<(), CliError> {
        fs::write(path, self.canonical())?;
        Ok(())
    }
}
