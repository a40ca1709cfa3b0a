//! Model and training hyperparameters.
//!
//! A run is described by a single TOML file: the model fields sit at the top
//! level and training knobs live under a `[train]` table. Both sections fall
//! back to the defaults below for any missing key.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::Path;

use crate::error::{Error, Result};

/// Which patches the masked student pass hides.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskingStrategy {
    /// Sample proportionally to softmax of patch/text cosine similarity.
    TextGuided,
    /// Uniform sampling.
    Random,
}

/// Reconstruction target of the masked-patch objective.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MimTarget {
    /// Soft codes from the momentum teacher (the default).
    Semantic,
    /// Regression of the raw patch pixels.
    Pixel,
    /// One-hot codes from a fixed colour quantiser of the mean patch colour.
    ColorQuantizer,
}

/// How ITM negatives are drawn from the batch.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NegativeSampling {
    /// Weighted by contrastive similarity (hard negatives).
    Hard,
    Uniform,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub image_layers: usize,
    pub text_layers: usize,
    pub fusion_layers: usize,
    pub decoder_layers: usize,
    pub heads: usize,
    /// Hidden width of transformer MLPs, as a multiple of `embed_dim`.
    pub mlp_ratio: usize,
    pub vocab_size: usize,
    /// Word slots per caption; token grids carry one extra CLS column.
    pub max_text_len: usize,
    /// Size K of the categorical encoding space.
    pub code_dim: usize,
    /// Hidden width of the encoding head MLP.
    pub head_hidden: usize,
    /// 1-based image-encoder layer from which text features are injected.
    pub inject_start_layer: usize,
    pub mask_ratio: f64,
    pub momentum: f64,
    pub student_temp: f64,
    pub teacher_temp: f64,
    pub center_momentum: f64,
    pub mlm_ratio: f64,
    pub itc_temp: f64,
    /// Text injection into the image encoder during MIM (student and teacher).
    pub inject_text: bool,
    pub masking: MaskingStrategy,
    pub mim_target: MimTarget,
    /// Teacher logit centering; with it off the teacher temperature still applies.
    pub centering: bool,
    pub itm_negatives: NegativeSampling,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            patch_size: 8,
            embed_dim: 64,
            image_layers: 6,
            text_layers: 3,
            fusion_layers: 2,
            decoder_layers: 2,
            heads: 4,
            mlp_ratio: 4,
            vocab_size: 128,
            max_text_len: 16,
            code_dim: 64,
            head_hidden: 64,
            inject_start_layer: 6,
            mask_ratio: 0.30,
            momentum: 0.99,
            student_temp: 0.1,
            teacher_temp: 0.04,
            center_momentum: 0.9,
            mlm_ratio: 0.15,
            itc_temp: 0.07,
            inject_text: true,
            masking: MaskingStrategy::TextGuided,
            mim_target: MimTarget::Semantic,
            centering: true,
            itm_negatives: NegativeSampling::Hard,
        }
    }
}

pub const CHANNELS: usize = 3;

impl ModelConfig {
    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    /// Number of patches N.
    pub fn num_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn patch_dim(&self) -> usize {
        CHANNELS * self.patch_size * self.patch_size
    }

    /// Width of a token grid: CLS plus `max_text_len` word slots.
    pub fn text_width(&self) -> usize {
        1 + self.max_text_len
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("image_size", self.image_size),
            ("patch_size", self.patch_size),
            ("embed_dim", self.embed_dim),
            ("image_layers", self.image_layers),
            ("text_layers", self.text_layers),
            ("fusion_layers", self.fusion_layers),
            ("decoder_layers", self.decoder_layers),
            ("heads", self.heads),
            ("mlp_ratio", self.mlp_ratio),
            ("vocab_size", self.vocab_size),
            ("max_text_len", self.max_text_len),
            ("code_dim", self.code_dim),
            ("head_hidden", self.head_hidden),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if !self.image_size.is_multiple_of(self.patch_size) {
            return Err(Error::Config(format!(
                "image_size {} is not divisible by patch_size {}",
                self.image_size, self.patch_size
            )));
        }
        if !self.embed_dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "embed_dim {} is not divisible by heads {}",
                self.embed_dim, self.heads
            )));
        }
        if self.inject_start_layer < 1 || self.inject_start_layer > self.image_layers {
            return Err(Error::Config(format!(
                "inject_start_layer {} outside 1..={}",
                self.inject_start_layer, self.image_layers
            )));
        }
        if !(self.mask_ratio > 0.0 && self.mask_ratio < 1.0) {
            return Err(Error::Config(format!("mask_ratio {} outside (0, 1)", self.mask_ratio)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum {} outside [0, 1)", self.momentum)));
        }
        if !(0.0..=1.0).contains(&self.center_momentum) {
            return Err(Error::Config(format!(
                "center_momentum {} outside [0, 1]",
                self.center_momentum
            )));
        }
        if !(self.mlm_ratio > 0.0 && self.mlm_ratio < 1.0) {
            return Err(Error::Config(format!("mlm_ratio {} outside (0, 1)", self.mlm_ratio)));
        }
        for (name, t) in [
            ("student_temp", self.student_temp),
            ("teacher_temp", self.teacher_temp),
            ("itc_temp", self.itc_temp),
        ] {
            if !(t > 0.0 && t.is_finite()) {
                return Err(Error::Config(format!("{name} must be a positive real, got {t}")));
            }
        }
        if self.vocab_size <= crate::data::vocab::SPECIAL_TOKENS {
            return Err(Error::Config("vocab_size leaves no room for words".into()));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON encoding, hex-encoded.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serialises");
        hex::encode(Sha256::digest(json.as_bytes()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugmentMode {
    /// Random crop-resize, horizontal flip and colour jitter per view.
    Standard,
    /// Both views are the input image.
    Identity,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub steps: usize,
    /// Peak learning rate of the image encoder group.
    pub lr_image: f64,
    /// Peak learning rate of every other parameter.
    pub lr_rest: f64,
    pub warmup_steps: usize,
    /// Final learning rate as a fraction of the peak.
    pub min_lr_ratio: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub corpus_size: usize,
    pub heldout: usize,
    pub augment: AugmentMode,
    /// Steps between checkpoints written by `pretrain`; 0 writes only the final one.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            steps: 200,
            lr_image: 3e-4,
            lr_rest: 1e-3,
            warmup_steps: 50,
            min_lr_ratio: 1e-2,
            weight_decay: 0.02,
            beta1: 0.9,
            beta2: 0.98,
            adam_eps: 1e-8,
            corpus_size: 256,
            heldout: 32,
            augment: AugmentMode::Standard,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.corpus_size < self.batch_size {
            return Err(Error::Config("corpus_size must be at least batch_size".into()));
        }
        if !(self.lr_image >= 0.0 && self.lr_rest >= 0.0) {
            return Err(Error::Config("learning rates must be non-negative".into()));
        }
        Ok(())
    }
}

/// Contents of a run configuration file.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    #[serde(flatten)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(s)?;
        cfg.model.validate()?;
        cfg.train.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serialises to toml")
    }

    /// SHA-256 over both sections; this is what checkpoints embed.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serialises");
        hex::encode(Sha256::digest(json.as_bytes()))
    }
}
