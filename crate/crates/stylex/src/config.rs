//! Run configuration: one TOML file drives every stage.
//!
//! Defaults follow the MNIST hyperparameter row (lambda_KL = 0.1,
//! lambda_MINE = 1e-2, d_style = 32); everything else is a recorded
//! artifact decision. Unknown keys are rejected so typos fail loudly.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::augment::AugmentConfig;
use crate::error::{Result, StylexError};
use crate::losses::LossWeights;
use crate::models::{ArchConfig, ModelDims};

pub const EFFECTIVE_CONFIG_FILE: &str = "effective_config.toml";

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    /// Data-loading worker hint; 0 means synchronous in-process loading.
    pub workers: usize,
    pub dataset: DatasetSection,
    pub augment: AugmentConfig,
    pub model: ModelSection,
    pub loss: LossWeights,
    pub cl: ClSection,
    pub cvae: CvaeSection,
    pub eval: EvalSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            output_dir: PathBuf::from("runs/default"),
            workers: 0,
            dataset: DatasetSection::default(),
            augment: AugmentConfig::default(),
            model: ModelSection::default(),
            loss: LossWeights::default(),
            cl: ClSection::default(),
            cvae: CvaeSection::default(),
            eval: EvalSection::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSection {
    /// "synthetic" or "mnist".
    pub kind: String,
    pub num_classes: u16,
    pub train_count: usize,
    pub test_count: usize,
    /// IDX paths, used when kind = "mnist".
    pub mnist_train_images: PathBuf,
    pub mnist_train_labels: PathBuf,
    pub mnist_test_images: PathBuf,
    pub mnist_test_labels: PathBuf,
}

impl Default for DatasetSection {
    fn default() -> Self {
        DatasetSection {
            kind: "synthetic".into(),
            num_classes: 10,
            train_count: 5000,
            test_count: 1000,
            mnist_train_images: PathBuf::from("mnist/train-images-idx3-ubyte"),
            mnist_train_labels: PathBuf::from("mnist/train-labels-idx1-ubyte"),
            mnist_test_images: PathBuf::from("mnist/t10k-images-idx3-ubyte"),
            mnist_test_labels: PathBuf::from("mnist/t10k-labels-idx1-ubyte"),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub image_side: usize,
    pub d_content: usize,
    pub d_style: usize,
    pub arch: ArchConfig,
    /// Ablation flag: L2-normalize content codes before conditioning.
    pub normalize_content: bool,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            image_side: 32,
            d_content: 128,
            d_style: 32,
            arch: ArchConfig::default(),
            normalize_content: false,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct ClSection {
    pub queue_size: usize,
    pub momentum: f64,
    pub tau: f64,
    pub epochs: u64,
    pub lr: f64,
    pub batch_size: usize,
}

impl Default for ClSection {
    fn default() -> Self {
        ClSection {
            queue_size: 4096,
            momentum: 0.99,
            tau: 0.2,
            epochs: 10,
            lr: 1e-3,
            batch_size: 128,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct CvaeSection {
    pub epochs: u64,
    pub lr: f64,
    pub sn_lr: f64,
    pub sn_steps_per_batch: u32,
    pub batch_size: usize,
    /// "cl" conditions on frozen contrastive codes; "supervised" on
    /// one-hot labels (the reference variant).
    pub condition: String,
    /// Sample z through the reparameterization during training; turning
    /// this off yields a deterministic conditional autoencoder.
    pub sample_latent: bool,
    /// Marginal style source: "gaussian" (the method) or "shuffle"
    /// (within-batch permutation, ablation only).
    pub marginal: String,
}

impl Default for CvaeSection {
    fn default() -> Self {
        CvaeSection {
            epochs: 20,
            lr: 1e-3,
            sn_lr: 1e-3,
            sn_steps_per_batch: 1,
            batch_size: 128,
            condition: "cl".into(),
            sample_latent: true,
            marginal: "gaussian".into(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    /// Interpolation magnitude bound; columns span [-radius, radius].
    pub interp_radius: f64,
    pub interp_steps: usize,
    pub interp_rows: usize,
    pub transfer_sources: usize,
    pub transfer_destinations: usize,
    pub neighbor_anchors: usize,
    pub neighbor_k: usize,
    /// "euclidean" or "cosine" (content-code galleries only).
    pub neighbor_metric: String,
    pub da_examples: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            interp_radius: 3.0,
            interp_steps: 11,
            interp_rows: 8,
            transfer_sources: 6,
            transfer_destinations: 8,
            neighbor_anchors: 6,
            neighbor_k: 8,
            neighbor_metric: "euclidean".into(),
            da_examples: 8,
        }
    }
}

impl RunConfig {
    /// Parse and validate a TOML config file; `STYLEX_OUTPUT` overrides
    /// the configured output directory.
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = fs::read_to_string(path).map_err(|e| StylexError::io(path, e))?;
        let mut config: RunConfig = toml::from_str(&text)
            .map_err(|e| StylexError::Config(format!("{}: {e}", path.display())))?;
        if let Ok(output) = std::env::var("STYLEX_OUTPUT") {
            if !output.is_empty() {
                config.output_dir = PathBuf::from(output);
            }
        }
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        match self.dataset.kind.as_str() {
            "synthetic" | "mnist" => {}
            other => {
                return Err(StylexError::Config(format!(
                    "dataset.kind must be \"synthetic\" or \"mnist\", got {other:?}"
                )))
            }
        }
        if self.dataset.kind == "synthetic" {
            if self.dataset.num_classes < 1 {
                return Err(StylexError::Config("dataset.num_classes must be >= 1".into()));
            }
            if self.dataset.train_count < 1 || self.dataset.test_count < 1 {
                return Err(StylexError::Config("dataset counts must be >= 1".into()));
            }
        }
        self.augment.validate()?;
        self.model.arch.validate()?;
        self.dims().validate()?;
        self.loss.validate()?;
        if self.cl.momentum < 0.0 || self.cl.momentum > 1.0 {
            return Err(StylexError::Config("cl.momentum must be in [0, 1]".into()));
        }
        if self.cl.queue_size < 4 * self.cl.batch_size {
            return Err(StylexError::Config(format!(
                "cl.queue_size ({}) must be at least 4x the batch size ({})",
                self.cl.queue_size, self.cl.batch_size
            )));
        }
        if self.cl.epochs < 1 || self.cvae.epochs < 1 {
            return Err(StylexError::Config("epochs must be >= 1".into()));
        }
        if self.cl.lr <= 0.0 || self.cvae.lr <= 0.0 || self.cvae.sn_lr <= 0.0 {
            return Err(StylexError::Config("learning rates must be positive".into()));
        }
        if self.cvae.sn_steps_per_batch < 1 {
            return Err(StylexError::Config("cvae.sn_steps_per_batch must be >= 1".into()));
        }
        if self.cl.batch_size < 1 || self.cvae.batch_size < 1 {
            return Err(StylexError::Config("batch sizes must be >= 1".into()));
        }
        match self.cvae.condition.as_str() {
            "cl" | "supervised" => {}
            other => {
                return Err(StylexError::Config(format!(
                    "cvae.condition must be \"cl\" or \"supervised\", got {other:?}"
                )))
            }
        }
        match self.cvae.marginal.as_str() {
            "gaussian" | "shuffle" => {}
            other => {
                return Err(StylexError::Config(format!(
                    "cvae.marginal must be \"gaussian\" or \"shuffle\", got {other:?}"
                )))
            }
        }
        match self.eval.neighbor_metric.as_str() {
            "euclidean" | "cosine" => {}
            other => {
                return Err(StylexError::Config(format!(
                    "eval.neighbor_metric must be \"euclidean\" or \"cosine\", got {other:?}"
                )))
            }
        }
        if self.eval.interp_steps < 1 || self.eval.interp_radius <= 0.0 {
            return Err(StylexError::Config("eval.interp settings invalid".into()));
        }
        Ok(())
    }

    /// Model dimensioning assembled from the model and cl sections.
    pub fn dims(&self) -> ModelDims {
        ModelDims {
            image_side: self.model.image_side,
            d_content: self.model.d_content,
            d_style: self.model.d_style,
            queue_size: self.cl.queue_size,
            tau: self.cl.tau,
        }
    }

    /// Dimensioning of the stage-2 condition: supervised conditioning
    /// swaps the content width for the class count.
    pub fn stage2_dims(&self, num_classes: u16) -> ModelDims {
        let mut dims = self.dims();
        if self.cvae.condition == "supervised" {
            dims.d_content = num_classes as usize;
        }
        dims
    }

    pub fn effective_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| StylexError::Serde(e.to_string()))
    }

    /// Hex SHA-256 of the effective serialized config.
    pub fn config_hash(&self) -> Result<String> {
        let text = self.effective_toml()?;
        let mut h = Sha256::new();
        h.update(text.as_bytes());
        Ok(h.finalize().iter().map(|b| format!("{b:02x}")).collect())
    }

    /// Write the defaults-merged config into the output directory.
    pub fn write_effective(&self) -> Result<PathBuf> {
        fs::create_dir_all(&self.output_dir)
            .map_err(|e| StylexError::io(&self.output_dir, e))?;
        let path = self.output_dir.join(EFFECTIVE_CONFIG_FILE);
        fs::write(&path, self.effective_toml()?).map_err(|e| StylexError::io(&path, e))?;
        Ok(path)
    }

    pub fn data_dir(&self) -> PathBuf {
        self.output_dir.join("data")
    }
    pub fn cl_dir(&self) -> PathBuf {
        self.output_dir.join("cl")
    }
    pub fn cvae_dir(&self) -> PathBuf {
        self.output_dir.join("cvae")
    }
    pub fn eval_dir(&self) -> PathBuf {
        self.output_dir.join("eval")
    }
}
