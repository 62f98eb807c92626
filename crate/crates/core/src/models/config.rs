use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Classifier architecture.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    /// Text tokens average-pooled, concatenated with pooled regions.
    EarlyFusionAvg,
    /// First text token as the pooled text vector.
    EarlyFusionFirst,
    /// Image-guided and text-guided cross-attention streams, fused late.
    DualStreamLateFusion,
    /// One encoder over `[CLS] + regions + text` with segment ids.
    SingleStreamBitransformer,
    /// Pooled regions through an MLP.
    ImageOnlyMlp,
}

impl Family {
    pub const ALL: [Family; 5] = [
        Family::EarlyFusionAvg,
        Family::EarlyFusionFirst,
        Family::DualStreamLateFusion,
        Family::SingleStreamBitransformer,
        Family::ImageOnlyMlp,
    ];

    pub fn uses_text(self) -> bool {
        self != Family::ImageOnlyMlp
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Family::EarlyFusionAvg => "early_fusion_avg",
            Family::EarlyFusionFirst => "early_fusion_first",
            Family::DualStreamLateFusion => "dual_stream_late_fusion",
            Family::SingleStreamBitransformer => "single_stream_bitransformer",
            Family::ImageOnlyMlp => "image_only_mlp",
        }
    }
}

impl std::str::FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Family::ALL
            .into_iter()
            .find(|f| f.as_str() == s)
            .ok_or_else(|| Error::config(format!("unknown model family `{s}`")))
    }
}

/// Late-fusion weights as configured; see [`FusionWeights`] for the
/// normalized pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FusionConfig {
    pub w1: f64,
    pub w2: f64,
    /// Learn the weights (softmax over two scalars) starting from `w1, w2`.
    pub trainable: bool,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            w1: 0.5,
            w2: 0.5,
            trainable: true,
        }
    }
}

/// Convex weights for the image-guided (`w1`) and text-guided (`w2`)
/// stream probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionWeights {
    w1: f64,
    w2: f64,
    warning: Option<String>,
}

impl FusionWeights {
    /// Normalizes `(w1, w2)` to sum to one, recording a warning when the
    /// input was not already normalized.
    pub fn new(w1: f64, w2: f64) -> Result<Self> {
        if !(w1.is_finite() && w2.is_finite()) || w1 < 0.0 || w2 < 0.0 {
            return Err(Error::invalid(format!(
                "fusion weights ({w1}, {w2}) must be finite and non-negative"
            )));
        }
        let sum = w1 + w2;
        if sum <= 0.0 {
            return Err(Error::invalid("fusion weights sum to zero"));
        }
        if (sum - 1.0).abs() <= 1e-12 {
            return Ok(Self { w1, w2, warning: None });
        }
        let warning = format!("fusion weights ({w1}, {w2}) normalized by their sum {sum}");
        log::warn!("{warning}");
        Ok(Self {
            w1: w1 / sum,
            w2: w2 / sum,
            warning: Some(warning),
        })
    }

    /// The validation-tuned pair reported for the dual-stream model.
    pub fn tuned() -> Self {
        Self {
            w1: 0.76,
            w2: 0.24,
            warning: None,
        }
    }

    pub fn w1(&self) -> f64 {
        self.w1
    }

    pub fn w2(&self) -> f64 {
        self.w2
    }

    pub fn warning(&self) -> Option<&str> {
        self.warning.as_deref()
    }
}

/// Architecture selector plus every hyperparameter a model needs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub family: Family,
    pub num_classes: usize,
    pub vocab_size: usize,
    pub encoder_layers: usize,
    pub heads: usize,
    pub model_dim: usize,
    pub ff_dim: usize,
    pub head_hidden_dim: usize,
    pub max_text_len: usize,
    /// Number of top-scoring regions consumed.
    pub num_regions: usize,
    pub region_feature_dim: usize,
    pub dropout: f64,
    pub label_smoothing: f64,
    pub fusion: FusionConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk(Family::SingleStreamBitransformer)
    }
}

impl ModelConfig {
    /// Small models that train in seconds on the synthetic task.
    pub fn desk(family: Family) -> Self {
        Self {
            family,
            num_classes: 9,
            vocab_size: 64,
            encoder_layers: 2,
            heads: 4,
            model_dim: 32,
            ff_dim: 64,
            head_hidden_dim: 32,
            max_text_len: 16,
            num_regions: 4,
            region_feature_dim: 8,
            dropout: 0.1,
            label_smoothing: 0.1,
            fusion: FusionConfig::default(),
        }
    }

    /// Full-size settings: BERT-base dimensions for the single-stream model
    /// (12 layers), 5 layers with 8 heads for the dual-stream encoders, 50
    /// bottom-up regions and the tuned fusion weights held fixed.
    pub fn full_size(family: Family) -> Self {
        let mut c = Self {
            family,
            num_classes: 9,
            vocab_size: 30_522,
            encoder_layers: 12,
            heads: 12,
            model_dim: 768,
            ff_dim: 3072,
            head_hidden_dim: 768,
            max_text_len: 64,
            num_regions: 50,
            region_feature_dim: 2048,
            dropout: 0.1,
            label_smoothing: 0.1,
            fusion: FusionConfig {
                w1: 0.76,
                w2: 0.24,
                trainable: false,
            },
        };
        if family == Family::DualStreamLateFusion {
            c.encoder_layers = 5;
            c.heads = 8;
            c.model_dim = 256;
            c.ff_dim = 1024;
            c.head_hidden_dim = 256;
        }
        c
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::config("num_classes must be at least 2"));
        }
        if self.num_regions == 0 && self.family != Family::SingleStreamBitransformer {
            return Err(Error::config(format!(
                "{} needs num_regions >= 1",
                self.family.as_str()
            )));
        }
        if self.heads == 0 || self.model_dim == 0 || !self.model_dim.is_multiple_of(self.heads) {
            return Err(Error::config(format!(
                "model_dim {} must be a positive multiple of heads {}",
                self.model_dim, self.heads
            )));
        }
        if self.ff_dim == 0 || self.head_hidden_dim == 0 || self.region_feature_dim == 0 {
            return Err(Error::config(
                "ff_dim, head_hidden_dim and region_feature_dim must be positive",
            ));
        }
        if self.family.uses_text() && (self.vocab_size < 3 || self.max_text_len == 0) {
            return Err(Error::config(
                "text families need vocab_size >= 3 and max_text_len >= 1",
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config(format!("dropout {} not in [0, 1)", self.dropout)));
        }
        if !(0.0..=1.0).contains(&self.label_smoothing) {
            return Err(Error::config(format!(
                "label_smoothing {} not in [0, 1]",
                self.label_smoothing
            )));
        }
        if self.family == Family::DualStreamLateFusion {
            FusionWeights::new(self.fusion.w1, self.fusion.w2).map_err(|e| Error::config(e.to_string()))?;
        }
        Ok(())
    }

    pub fn fusion_weights(&self) -> Result<FusionWeights> {
        FusionWeights::new(self.fusion.w1, self.fusion.w2)
    }
}
