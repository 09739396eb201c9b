//! Model presets, optimizer settings, ablation modes and the run
//! configuration.

use alloc::format;
use alloc::string::{String, ToString};

use serde::{Deserialize, Serialize};

use crate::cues::CueConfig;
use crate::encoders::VitConfig;
use crate::error::{Error, Result};
use crate::fusion::{FusionConfig, VisualStates, DEFAULT_PROMPT};
use crate::losses::LossWeights;
use crate::media::LkParams;
use crate::nn::LoraConfig;
use crate::segmenter::SegmenterConfig;

/// Pipeline variants compared in the ablations.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AblationMode {
    /// Current frame only.
    #[serde(rename = "image-only")]
    ImageOnly,
    /// Current frame plus its AnyRes patches.
    #[serde(rename = "image+spatial")]
    ImageSpatial,
    /// Three frames, flow and patches.
    #[serde(rename = "full")]
    Full,
    /// Full clues without the background branch or its losses.
    #[serde(rename = "no-background")]
    NoBackground,
    /// Full clues concatenated along the feature axis instead of the sequence.
    #[serde(rename = "fusion-channel")]
    FusionChannel,
}

impl AblationMode {
    pub const ALL: [AblationMode; 5] = [
        AblationMode::ImageOnly,
        AblationMode::ImageSpatial,
        AblationMode::Full,
        AblationMode::NoBackground,
        AblationMode::FusionChannel,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            AblationMode::ImageOnly => "image-only",
            AblationMode::ImageSpatial => "image+spatial",
            AblationMode::Full => "full",
            AblationMode::NoBackground => "no-background",
            AblationMode::FusionChannel => "fusion-channel",
        }
    }

    pub fn parse(tag: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.tag() == tag)
            .ok_or_else(|| Error::invalid(format!("unknown ablation mode '{tag}'")))
    }

    pub fn uses_temporal(self) -> bool {
        !matches!(self, AblationMode::ImageOnly | AblationMode::ImageSpatial)
    }

    pub fn uses_spatial(self) -> bool {
        self != AblationMode::ImageOnly
    }

    pub fn uses_background(self) -> bool {
        self != AblationMode::NoBackground
    }
}

impl core::fmt::Display for AblationMode {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.write_str(self.tag())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub clue_encoder: VitConfig,
    pub fusion: FusionConfig,
    pub segmenter: SegmenterConfig,
    pub cues: CueConfig,
    /// AnyRes grid side; `K = anyres_grid²` patches.
    pub anyres_grid: usize,
    pub lora: LoraConfig,
    pub flow: LkParams,
    pub prompt: String,
}

impl ModelConfig {
    pub fn desk() -> Self {
        let size = 64;
        ModelConfig {
            clue_encoder: VitConfig { size, patch: 8, depth: 2, heads: 4, dim: 64 },
            fusion: FusionConfig { dim: 128, depth: 4, heads: 4, max_seq: 1024, visual_states: VisualStates::Residual },
            segmenter: SegmenterConfig {
                encoder: VitConfig { size, patch: 4, depth: 2, heads: 4, dim: 64 },
                dec_heads: 4,
                dec_blocks: 2,
                mlp_hidden: 128,
                mask_grid: 16,
            },
            cues: CueConfig {
                d_llm: 128,
                d_s: 64,
                pool: 64,
                long: 64,
                short: 4,
                mask_grid: 16,
                mask_channels: 8,
                score_hidden: 64,
                box_hidden: 128,
            },
            anyres_grid: 2,
            lora: LoraConfig::with_rank(4),
            flow: LkParams::default(),
            prompt: DEFAULT_PROMPT.to_string(),
        }
    }

    /// Published scale: SigLIP-so400m-like clue encoder at 384 px, a
    /// Qwen2-7B-sized fusion stack and a ViT-H-sized segmenter. Not meant
    /// to be instantiated on a CPU.
    pub fn paper() -> Self {
        ModelConfig {
            clue_encoder: VitConfig { size: 384, patch: 14, depth: 27, heads: 16, dim: 1152 },
            fusion: FusionConfig {
                dim: 3584,
                depth: 28,
                heads: 28,
                max_seq: 8192,
                visual_states: VisualStates::Residual,
            },
            segmenter: SegmenterConfig {
                encoder: VitConfig { size: 1024, patch: 16, depth: 32, heads: 16, dim: 1280 },
                dec_heads: 8,
                dec_blocks: 2,
                mlp_hidden: 2048,
                mask_grid: 64,
            },
            cues: CueConfig {
                d_llm: 3584,
                d_s: 1280,
                pool: 256,
                long: 256,
                short: 4,
                mask_grid: 64,
                mask_channels: 1,
                score_hidden: 1024,
                box_hidden: 1024,
            },
            anyres_grid: 2,
            lora: LoraConfig::with_rank(128),
            flow: LkParams::default(),
            prompt: DEFAULT_PROMPT.to_string(),
        }
    }

    /// Number of clue images per timestep for `mode`.
    pub fn clue_images(&self, mode: AblationMode) -> usize {
        let k = self.anyres_grid * self.anyres_grid;
        match mode {
            AblationMode::ImageOnly => 1,
            AblationMode::ImageSpatial => 1 + k,
            _ => 4 + k,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.clue_encoder.validate()?;
        self.segmenter.encoder.validate()?;
        let err = |m: &str| Err(Error::invalid(m.to_string()));
        if self.fusion.depth < 3 {
            return err("fusion depth must be at least 3");
        }
        if self.fusion.heads == 0 || !self.fusion.dim.is_multiple_of(self.fusion.heads) {
            return err("fusion heads must divide the fusion width");
        }
        if self.cues.d_llm != self.fusion.dim {
            return err("cue width d_llm must equal the fusion width");
        }
        if self.cues.d_s != self.segmenter.encoder.dim {
            return err("cue width d_s must equal the segmenter width");
        }
        if self.cues.mask_grid != self.segmenter.mask_grid {
            return err("cue and segmenter mask grids differ");
        }
        let c = self.cues.long;
        let gc = c.isqrt();
        if gc * gc != c {
            return err("cue token count must be a perfect square");
        }
        if self.cues.long > self.cues.pool || self.cues.short == 0 || self.cues.short > self.cues.pool {
            return err("cue pools must satisfy 1 <= short, long <= pool");
        }
        if self.anyres_grid == 0 {
            return err("AnyRes grid must be at least 1");
        }
        if self.lora.rank == 0 {
            return err("LoRA rank must be positive");
        }
        if self.segmenter.dec_heads == 0 || !self.segmenter.encoder.dim.is_multiple_of(self.segmenter.dec_heads) {
            return err("decoder heads must divide the segmenter width");
        }
        if self.clue_encoder.size < 8 || self.segmenter.encoder.size < 8 {
            return err("frame size must be at least 8");
        }
        Ok(())
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig::desk()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimConfig {
    pub lr_peak: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub warmup_frac: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig { lr_peak: 2e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0, warmup_frac: 0.1 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub optim: OptimConfig,
    pub epochs: usize,
    pub grad_accum: usize,
    pub seed: u64,
    pub mode: AblationMode,
    pub loss_weights: LossWeights,
}

impl RunConfig {
    pub fn desk() -> Self {
        RunConfig {
            model: ModelConfig::desk(),
            optim: OptimConfig::default(),
            epochs: 2,
            grad_accum: 4,
            seed: 0,
            mode: AblationMode::Full,
            loss_weights: LossWeights::default(),
        }
    }

    pub fn paper() -> Self {
        RunConfig { model: ModelConfig::paper(), ..RunConfig::desk() }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let o = &self.optim;
        if !(o.lr_peak > 0.0 && o.lr_peak.is_finite()) {
            return Err(Error::invalid("lr_peak must be positive"));
        }
        if !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) || o.eps <= 0.0 {
            return Err(Error::invalid("Adam betas must lie in [0, 1) and eps must be positive"));
        }
        if o.weight_decay < 0.0 || !(0.0..=1.0).contains(&o.warmup_frac) {
            return Err(Error::invalid("weight decay must be >= 0 and warmup_frac in [0, 1]"));
        }
        if self.epochs == 0 || self.grad_accum == 0 {
            return Err(Error::invalid("epochs and grad_accum must be positive"));
        }
        Ok(())
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig::desk()
    }
}
