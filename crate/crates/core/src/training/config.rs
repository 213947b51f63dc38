use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{make_blobs, make_rings, AugmentConfig, Dataset};
use crate::distributions::Sampler;
use crate::error::{Error, Result};
use crate::networks::{ArchConfig, DEFAULT_TAU};
use crate::objectives::ObjectiveConfig;
use crate::rng::Prng;
use crate::training::{OptimizerConfig, Schedule};

/// Synthetic dataset description.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSpec {
    Blobs {
        k: usize,
        input_dim: usize,
        n: usize,
        spread: f64,
        #[serde(default)]
        seed: Option<u64>,
    },
    Rings {
        k: usize,
        input_dim: usize,
        n: usize,
        noise: f64,
        #[serde(default)]
        seed: Option<u64>,
    },
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec::Blobs {
            k: 4,
            input_dim: 32,
            n: 2000,
            spread: 0.25,
            seed: None,
        }
    }
}

impl DatasetSpec {
    pub fn input_dim(&self) -> usize {
        match *self {
            DatasetSpec::Blobs { input_dim, .. } | DatasetSpec::Rings { input_dim, .. } => input_dim,
        }
    }

    /// Generate the dataset from its own `seed` if set, else from `run_seed`.
    pub fn generate(&self, run_seed: u64) -> Result<Dataset> {
        match *self {
            DatasetSpec::Blobs {
                k,
                input_dim,
                n,
                spread,
                seed,
            } => {
                let mut rng = Prng::derive(seed.unwrap_or(run_seed), &[DATA_STREAM]);
                make_blobs(k, input_dim, n, spread, &mut rng)
            }
            DatasetSpec::Rings {
                k,
                input_dim,
                n,
                noise,
                seed,
            } => {
                let mut rng = Prng::derive(seed.unwrap_or(run_seed), &[DATA_STREAM]);
                make_rings(k, n, noise, input_dim, &mut rng)
            }
        }
    }
}

/// Which head outputs the KL compares.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KlOn {
    #[default]
    Predicted,
    Projected,
}

/// Complete description of a training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: DatasetSpec,
    pub objective: ObjectiveConfig,
    pub tau: f64,
    pub sampler: Sampler,
    pub kl_on: KlOn,
    pub optimizer: OptimizerConfig,
    pub schedule: Schedule,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub latent_dim: usize,
    pub feat_dim: usize,
    pub encoder_hidden: usize,
    pub head_hidden: usize,
    pub augment: AugmentConfig,
    /// Defaults to `<out>/checkpoint`.
    pub checkpoint_dir: Option<PathBuf>,
    /// Defaults to `<out>/metrics.jsonl`.
    pub metrics_path: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let arch = ArchConfig::default();
        Self {
            dataset: DatasetSpec::default(),
            objective: ObjectiveConfig::default(),
            tau: DEFAULT_TAU,
            sampler: Sampler::HalfNormal,
            kl_on: KlOn::Predicted,
            optimizer: OptimizerConfig::default(),
            schedule: Schedule::default(),
            batch_size: 64,
            epochs: 200,
            seed: 0,
            latent_dim: arch.latent_dim,
            feat_dim: arch.feat_dim,
            encoder_hidden: arch.encoder_hidden,
            head_hidden: arch.head_hidden,
            augment: AugmentConfig::default(),
            checkpoint_dir: None,
            metrics_path: None,
        }
    }
}

pub(crate) const DATA_STREAM: u64 = 1;
pub(crate) const INIT_STREAM: u64 = 2;
pub(crate) const FLIP_STREAM: u64 = 3;
pub(crate) const ORDER_STREAM: u64 = 4;
pub(crate) const AUGMENT_STREAM: u64 = 5;
pub(crate) const SAMPLE_STREAM: u64 = 6;

impl RunConfig {
    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let cfg: RunConfig = serde_json::from_slice(&text).map_err(|e| Error::json(path, e))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn arch(&self) -> ArchConfig {
        ArchConfig {
            input_dim: self.dataset.input_dim(),
            encoder_hidden: self.encoder_hidden,
            feat_dim: self.feat_dim,
            head_hidden: self.head_hidden,
            latent_dim: self.latent_dim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.objective.validate()?;
        self.optimizer.validate()?;
        self.augment.validate()?;
        self.arch().validate()?;
        if !(0.0..=1.0).contains(&self.tau) {
            return Err(Error::Config(format!("tau must lie in [0, 1], got {}", self.tau)));
        }
        if self.batch_size < 2 {
            return Err(Error::Config(format!(
                "batch_size must be at least 2 for batch normalization, got {}",
                self.batch_size
            )));
        }
        Ok(())
    }

    pub fn checkpoint_dir(&self, out: &Path) -> PathBuf {
        self.checkpoint_dir
            .clone()
            .unwrap_or_else(|| out.join("checkpoint"))
    }

    pub fn metrics_path(&self, out: &Path) -> PathBuf {
        self.metrics_path
            .clone()
            .unwrap_or_else(|| out.join("metrics.jsonl"))
    }
}
