use core::fmt;
use core::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::armf::ImagePrior;
use crate::error::{invalid, Error, Result};
use crate::retention::{GammaSchedule, GammaStrategy, DEFAULT_GAMMA_SUBTRACTOR, DEFAULT_TAU};

/// Token mixer of each decoder layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mixer {
    /// Multi-head ARMF with scheduled decay.
    #[default]
    Retention,
    /// Joint softmax attention over image keys and causal text keys.
    Attention,
}

impl Mixer {
    pub fn name(self) -> &'static str {
        match self {
            Mixer::Retention => "retention",
            Mixer::Attention => "attention",
        }
    }
}

impl fmt::Display for Mixer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Mixer {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "retention" => Ok(Mixer::Retention),
            "attention" => Ok(Mixer::Attention),
            _ => Err(invalid("Mixer", alloc::format!("unknown mixer `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub layers: usize,
    pub heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    /// Characters plus the three special tokens.
    pub vocab_size: usize,
    pub max_text_len: usize,
    /// Rows of the learnable image-position table.
    pub max_image_tokens: usize,
    pub image_height: usize,
    /// Output channels of the three convolution stages.
    pub cnn_channels: [usize; 3],
    pub dropout_mixer: f64,
    pub dropout_ff: f64,
    pub dropout_embed: f64,
    pub gamma: GammaStrategy,
    pub gamma_subtractor: f64,
    pub tau: f64,
    pub image_prior: ImagePrior,
    pub mixer: Mixer,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            layers: 12,
            heads: 12,
            d_model: 768,
            d_ff: 3072,
            vocab_size: 83,
            max_text_len: 128,
            max_image_tokens: 1024,
            image_height: 32,
            cnn_channels: [16, 32, 32],
            dropout_mixer: 0.3,
            dropout_ff: 0.3,
            dropout_embed: 0.1,
            gamma: GammaStrategy::LayerWise,
            gamma_subtractor: DEFAULT_GAMMA_SUBTRACTOR,
            tau: DEFAULT_TAU,
            image_prior: ImagePrior::None,
            mixer: Mixer::Retention,
        }
    }
}

/// Total height stride of the convolution stack.
pub const HEIGHT_STRIDE: usize = 8;
/// Total width stride of the convolution stack.
pub const WIDTH_STRIDE: usize = 4;
/// Per-stage `(height, width)` strides.
pub const STAGE_STRIDES: [(usize, usize); 3] = [(2, 1), (2, 2), (2, 2)];

impl ModelConfig {
    pub fn d_head(&self) -> usize {
        self.d_model / self.heads
    }

    pub fn schedule(&self) -> GammaSchedule {
        GammaSchedule {
            strategy: self.gamma,
            layers: self.layers.max(1),
            heads: self.heads,
            gamma_subtractor: self.gamma_subtractor,
            tau: self.tau,
        }
    }

    /// Feature width fed to the image projection: `c_visual · h_visual`.
    pub fn visual_features(&self) -> usize {
        self.cnn_channels[2] * (self.image_height / HEIGHT_STRIDE)
    }

    /// Image token count for an input of width `w`.
    pub fn image_tokens(&self, width: usize) -> usize {
        let mut w = width;
        for (_, sw) in STAGE_STRIDES {
            w = (w - 1) / sw + 1;
        }
        w
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(invalid("ModelConfig", msg));
        if self.heads == 0 || self.d_model == 0 || self.d_model % self.heads != 0 {
            return bad("d_model must be a positive multiple of heads");
        }
        if self.vocab_size < 4 {
            return bad("vocabulary needs at least one character besides the specials");
        }
        if self.d_ff == 0 || self.max_text_len < 2 || self.max_image_tokens == 0 {
            return bad("d_ff, max_text_len and max_image_tokens must be positive (max_text_len ≥ 2)");
        }
        if self.image_height == 0 || self.image_height % HEIGHT_STRIDE != 0 {
            return bad("image height must be a positive multiple of 8");
        }
        if self.cnn_channels.iter().any(|&c| c == 0) {
            return bad("channel counts must be positive");
        }
        for p in [self.dropout_mixer, self.dropout_ff, self.dropout_embed] {
            if !(0.0..1.0).contains(&p) {
                return bad("dropout rates must lie in [0, 1)");
            }
        }
        if self.mixer == Mixer::Retention && self.layers > 0 && self.gamma != GammaStrategy::Gated {
            self.schedule().gamma_table()?;
        }
        Ok(())
    }

    pub fn gated(&self) -> bool {
        self.mixer == Mixer::Retention && self.gamma == GammaStrategy::Gated
    }
}
