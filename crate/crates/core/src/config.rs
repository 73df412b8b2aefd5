//! Model and training configuration.
//!
//! A configuration file is a flat `key = value` document (TOML syntax) whose
//! keys are exactly the field names of [`ModelConfig`]. Keys absent from the
//! file keep the value of the profile the file is layered on.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackboneKind {
    /// Small trainable stand-ins shipped with this crate.
    Toy,
    /// Adapter seam for pretrained encoders; no adapter is bundled.
    External,
}

/// Normalization applied in the decoder query update.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpdateNorm {
    Layer,
    L2,
}

/// Which image features query selection scores.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TiqsInput {
    /// Fused encoder output, before language-guided re-weighting.
    PreLgfa,
    /// Re-weighted features.
    PostLgfa,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub feature_dim: usize,
    pub num_encoder_layers: usize,
    pub num_text_layers: usize,
    pub num_decoder_layers: usize,
    pub num_heads: usize,
    pub top_k: usize,
    pub beta: f64,
    pub temperature: f64,
    pub lambda_l1: f64,
    pub lambda_giou: f64,
    pub lambda_cts: f64,
    pub image_size: usize,
    pub max_text_len: usize,
    pub num_feature_levels: usize,
    pub seed: u64,

    pub ffn_dim: usize,
    pub backbone: BackboneKind,
    pub update_norm: UpdateNorm,
    pub tiqs_input: TiqsInput,
    /// Add the object-to-text direction to the contrastive term.
    pub symmetric_contrastive: bool,
    /// Supervise every decoder layer instead of the last one only.
    pub aux_loss: bool,

    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub train_steps: usize,
    /// Global gradient-norm clip; `0` disables clipping.
    pub grad_clip: f64,
    /// Linear learning-rate ramp over the first steps.
    pub warmup_steps: usize,
    /// Cosine-anneal the learning rate to zero at `train_steps`.
    pub cosine_decay: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            feature_dim: 256,
            num_encoder_layers: 6,
            num_text_layers: 6,
            num_decoder_layers: 6,
            num_heads: 8,
            top_k: 100,
            beta: 0.7,
            temperature: 0.07,
            lambda_l1: 5.0,
            lambda_giou: 2.0,
            lambda_cts: 2.0,
            image_size: 640,
            max_text_len: 256,
            num_feature_levels: 4,
            seed: 0,
            ffn_dim: 2048,
            backbone: BackboneKind::Toy,
            update_norm: UpdateNorm::Layer,
            tiqs_input: TiqsInput::PreLgfa,
            symmetric_contrastive: false,
            aux_loss: false,
            learning_rate: 1e-4,
            weight_decay: 1e-5,
            batch_size: 16,
            train_steps: 10_000,
            grad_clip: 0.1,
            warmup_steps: 0,
            cosine_decay: false,
        }
    }
}

impl ModelConfig {
    /// Desk-scale profile: 64 px images, 16 text tokens, C = 64, two layers everywhere.
    pub fn toy() -> Self {
        ModelConfig {
            feature_dim: 64,
            num_encoder_layers: 2,
            num_text_layers: 2,
            num_decoder_layers: 2,
            num_heads: 4,
            top_k: 10,
            image_size: 64,
            max_text_len: 16,
            num_feature_levels: 2,
            ffn_dim: 128,
            learning_rate: 1e-3,
            batch_size: 4,
            train_steps: 500,
            grad_clip: 1.0,
            warmup_steps: 20,
            cosine_decay: true,
            ..ModelConfig::default()
        }
    }

    /// Stride of feature level `level` in input pixels.
    pub fn level_stride(&self, level: usize) -> usize {
        4 << level
    }

    /// Grid side length of each feature level.
    pub fn level_grid(&self, level: usize) -> usize {
        self.image_size / self.level_stride(level)
    }

    /// Number of flattened image tokens across all levels.
    pub fn num_image_tokens(&self) -> usize {
        (0..self.num_feature_levels)
            .map(|l| self.level_grid(l).pow(2))
            .sum()
    }

    /// Number of cross-modality fusion rounds, `min(N_v, N_l)`.
    pub fn fusion_rounds(&self) -> usize {
        self.num_encoder_layers.min(self.num_text_layers)
    }

    /// Learning rate for 1-based optimizer step `step`.
    pub fn lr_at(&self, step: usize) -> f64 {
        let mut lr = self.learning_rate;
        if step <= self.warmup_steps {
            lr *= step as f64 / (self.warmup_steps + 1) as f64;
        }
        if self.cosine_decay && self.train_steps > 0 {
            let progress = (step.min(self.train_steps) as f64) / self.train_steps as f64;
            lr *= 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
        }
        lr
    }

    pub fn rng(&self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.seed)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.feature_dim == 0 || self.feature_dim % 4 != 0 {
            return fail(format!("feature_dim {} must be a positive multiple of 4", self.feature_dim));
        }
        if self.num_heads == 0 || self.feature_dim % self.num_heads != 0 {
            return fail(format!(
                "feature_dim {} must be divisible by num_heads {}",
                self.feature_dim, self.num_heads
            ));
        }
        if self.num_encoder_layers == 0 || self.num_text_layers == 0 || self.num_decoder_layers == 0 {
            return fail("layer counts must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&self.beta) {
            return fail(format!("beta {} outside [0, 1]", self.beta));
        }
        if !(self.temperature > 0.0) {
            return fail(format!("temperature {} must be positive", self.temperature));
        }
        for (name, v) in [
            ("lambda_l1", self.lambda_l1),
            ("lambda_giou", self.lambda_giou),
            ("lambda_cts", self.lambda_cts),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return fail(format!("{name} {v} must be finite and non-negative"));
            }
        }
        if self.num_feature_levels == 0 {
            return fail("num_feature_levels must be at least 1".into());
        }
        let coarsest = self.level_stride(self.num_feature_levels - 1);
        if self.image_size == 0 || self.image_size % coarsest != 0 {
            return fail(format!(
                "image_size {} must be a positive multiple of the coarsest stride {coarsest}",
                self.image_size
            ));
        }
        if self.max_text_len == 0 {
            return fail("max_text_len must be at least 1".into());
        }
        if self.top_k == 0 || self.top_k > self.num_image_tokens() {
            return fail(format!(
                "top_k {} must be in 1..={} image tokens",
                self.top_k,
                self.num_image_tokens()
            ));
        }
        if self.ffn_dim == 0 || self.batch_size == 0 {
            return fail("ffn_dim and batch_size must be positive".into());
        }
        if !(self.learning_rate > 0.0) || !(self.weight_decay >= 0.0) || !(self.grad_clip >= 0.0) {
            return fail("learning_rate must be positive; weight_decay and grad_clip non-negative".into());
        }
        Ok(())
    }

    /// Parse a flat key-value document layered over `base`.
    pub fn from_toml_str(text: &str, base: &ModelConfig) -> Result<Self> {
        let overrides: toml::Table =
            toml::from_str(text).map_err(|e| Error::Config(format!("malformed config: {e}")))?;
        let mut merged = toml::Table::try_from(base)
            .map_err(|e| Error::Config(format!("cannot serialize base config: {e}")))?;
        for (key, value) in overrides {
            if value.is_table() || value.is_array() {
                return Err(Error::Config(format!("config key {key:?} must be a scalar")));
            }
            merged.insert(key, value);
        }
        let cfg: ModelConfig = merged
            .try_into()
            .map_err(|e| Error::Config(format!("invalid config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>, base: &ModelConfig) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text, base)
    }

    /// Render as a flat key-value document that [`ModelConfig::from_toml_str`] accepts.
    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("flat config always serializes")
    }
}
