//! Run configuration: model geometry, training schedule, loss weights, and
//! data paths. Loaded from TOML for the CLI; constructed directly in tests.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Where local features come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BackboneKind {
    /// Small trainable patch backbone for self-contained experiments.
    Toy,
    /// Local features are precomputed and loaded from feature files.
    ExternalFeatures,
}

/// Aggregator geometry.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub backbone: BackboneKind,
    /// Number of cascaded aggregation blocks.
    pub num_blocks: usize,
    /// Learnable queries per block.
    pub queries_per_block: usize,
    /// Local feature dimension.
    pub feature_dim: usize,
    /// Rows of the query-mixing projection; the descriptor has
    /// `num_combinations * feature_dim` entries.
    pub num_combinations: usize,
    pub encoder_heads: usize,
    pub encoder_ffn_dim: usize,
    /// Square resize applied to training images.
    pub train_resize: usize,
    /// Square resize applied at evaluation time.
    pub eval_resize: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            backbone: BackboneKind::Toy,
            num_blocks: 2,
            queries_per_block: 64,
            feature_dim: 384,
            num_combinations: 32,
            encoder_heads: 8,
            encoder_ffn_dim: 1536,
            train_resize: 280,
            eval_resize: 322,
        }
    }
}

impl ModelConfig {
    /// Reference configuration: two blocks of 64 queries over 384-dim
    /// features mixed into 32 combinations (12288-dim descriptors).
    pub fn reference() -> Self {
        Self::default()
    }

    /// Small geometry that keeps unit tests and demos fast.
    pub fn tiny() -> Self {
        ModelConfig {
            backbone: BackboneKind::Toy,
            num_blocks: 2,
            queries_per_block: 8,
            feature_dim: 32,
            num_combinations: 4,
            encoder_heads: 4,
            encoder_ffn_dim: 64,
            train_resize: 42,
            eval_resize: 42,
        }
    }

    pub fn total_queries(&self) -> usize {
        self.num_blocks * self.queries_per_block
    }

    pub fn descriptor_dim(&self) -> usize {
        self.num_combinations * self.feature_dim
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_blocks < 1 {
            return Err(Error::Config("num_blocks must be >= 1".into()));
        }
        if self.queries_per_block < 1 {
            return Err(Error::Config("queries_per_block must be >= 1".into()));
        }
        if self.num_combinations < 1 || self.num_combinations > self.total_queries() {
            return Err(Error::Config(format!(
                "num_combinations must be in 1..={} (blocks x queries), got {}",
                self.total_queries(),
                self.num_combinations
            )));
        }
        if self.encoder_heads < 1 || self.feature_dim % self.encoder_heads != 0 {
            return Err(Error::Config(format!(
                "feature_dim {} must be divisible by encoder_heads {}",
                self.feature_dim, self.encoder_heads
            )));
        }
        if self.train_resize == 0 || self.eval_resize == 0 {
            return Err(Error::Config("resize dims must be positive".into()));
        }
        Ok(())
    }
}

/// Pairwise-similarity loss and miner settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct MsLossConfig {
    pub alpha: f32,
    pub beta: f32,
    pub base: f32,
    pub miner_epsilon: f32,
}

impl Default for MsLossConfig {
    fn default() -> Self {
        MsLossConfig {
            alpha: 1.0,
            beta: 50.0,
            base: 0.0,
            miner_epsilon: 0.1,
        }
    }
}

/// Query-combination triplet loss settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct LocalLossConfig {
    /// Hinge margin.
    pub margin: f32,
    /// Hard negatives mined per anchor.
    pub hard_negatives: usize,
    /// Combinations kept per anchor (highest positive similarity).
    pub top_combinations: usize,
}

impl Default for LocalLossConfig {
    fn default() -> Self {
        LocalLossConfig {
            margin: 0.05,
            hard_negatives: 10,
            top_combinations: 8,
        }
    }
}

/// Weights combining the loss terms into the training objective.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub local: f64,
    pub adv_query: f64,
    pub adv_feature: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            local: 0.01,
            adv_query: 0.05,
            adv_feature: 0.05,
        }
    }
}

/// Domain-adversarial head settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct AdversarialConfig {
    pub enabled: bool,
    /// Gradient multiplier applied by the reversal layer (negative reverses).
    pub lambda: f32,
    pub hidden_dim: usize,
    pub num_domains: usize,
}

impl Default for AdversarialConfig {
    fn default() -> Self {
        AdversarialConfig {
            enabled: true,
            lambda: -1.0,
            hidden_dim: 512,
            num_domains: 6,
        }
    }
}

/// Optimizer and schedule settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub base_lr: f64,
    /// Epochs of linear warmup from zero to `base_lr`.
    pub warmup_epochs: usize,
    /// After warmup the rate is multiplied by `decay_factor` once per
    /// `decay_every` epochs (step schedule).
    pub decay_every: usize,
    pub decay_factor: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Places sampled per batch.
    pub batch_places: usize,
    /// Images sampled per place.
    pub images_per_place: usize,
    pub seed: u64,
    /// Optional global gradient-norm clip; disabled when absent.
    pub grad_clip: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 40,
            base_lr: 3e-4,
            warmup_epochs: 10,
            decay_every: 10,
            decay_factor: 0.1,
            weight_decay: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            batch_places: 160,
            images_per_place: 4,
            seed: 0,
            grad_clip: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if self.batch_places == 0 || self.images_per_place == 0 {
            return Err(Error::Config("batch sizes must be positive".into()));
        }
        if self.decay_every == 0 {
            return Err(Error::Config("decay_every must be >= 1".into()));
        }
        if !(self.base_lr > 0.0) {
            return Err(Error::Config("base_lr must be positive".into()));
        }
        Ok(())
    }

    /// Learning rate at the start of `epoch` (0-based): linear warmup to
    /// `base_lr` over `warmup_epochs`, then a step decay.
    pub fn lr_at_epoch(&self, epoch: usize) -> f64 {
        if self.warmup_epochs > 0 && epoch < self.warmup_epochs {
            self.base_lr * epoch as f64 / self.warmup_epochs as f64
        } else {
            let steps = (epoch - self.warmup_epochs) / self.decay_every;
            self.base_lr * self.decay_factor.powi(steps as i32)
        }
    }

    /// Learning rate for a specific step, interpolating linearly between the
    /// epoch boundary rates so warmup ramps smoothly within epochs.
    pub fn lr_at_step(&self, epoch: usize, step: usize, steps_per_epoch: usize) -> f64 {
        let here = self.lr_at_epoch(epoch);
        let next = self.lr_at_epoch(epoch + 1);
        if steps_per_epoch <= 1 {
            return here;
        }
        let t = step as f64 / steps_per_epoch as f64;
        here + (next - here) * t
    }
}

/// Dataset paths for training runs.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    /// Manifest CSV listing images, place ids, geo tags, and splits.
    pub manifest: String,
    /// Directory for checkpoints and logs.
    pub out_dir: String,
}

/// Full run configuration as loaded from a TOML file.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub ms_loss: MsLossConfig,
    pub local_loss: LocalLossConfig,
    pub loss_weights: LossWeights,
    pub adversarial: AdversarialConfig,
    pub data: DataConfig,
}

impl RunConfig {
    pub fn from_toml_str(s: &str) -> Result<RunConfig> {
        let cfg: RunConfig =
            toml::from_str(s).map_err(|e| Error::Config(format!("bad config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_toml_file(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        if self.adversarial.num_domains == 0 {
            return Err(Error::Config("num_domains must be >= 1".into()));
        }
        Ok(())
    }
}
