//! The classifier families behind one forward/loss/predict interface.

mod checkpoint;
mod config;
mod dual;
mod early;
mod image_only;
mod single;

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::{Family, FusionConfig, FusionWeights, ModelConfig};

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::MultimodalSample;
use crate::error::{Error, Result};
use crate::losses::{self, KlDirection};
use crate::nn::{EmbeddingTable, ForwardCtx, LayerNorm};
use crate::params::ParamStore;
use crate::seed;
use crate::tape::{Tape, Var};

/// Training objective.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// Cross-entropy against the label-smoothed caption label.
    #[default]
    LabelSmoothedCe,
    /// KL divergence against the annotator distribution.
    KlToAnnotator,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub kind: LossKind,
    pub kl_direction: KlDirection,
}

/// What a forward pass produces.
#[derive(Debug, Clone, Copy)]
pub enum ModelOutput<'t> {
    Logits(Var<'t>),
    /// Late fusion of two streams.
    Fused {
        probs: Var<'t>,
        image_logits: Var<'t>,
        text_logits: Var<'t>,
        image_probs: Var<'t>,
        text_probs: Var<'t>,
    },
}

impl<'t> ModelOutput<'t> {
    /// Class probabilities.
    pub fn probabilities(&self) -> Result<Var<'t>> {
        match self {
            ModelOutput::Logits(z) => z.softmax(),
            ModelOutput::Fused { probs, .. } => Ok(*probs),
        }
    }

    /// The scalar that attribution differentiates: the class logit, or the
    /// log of the fused class probability.
    pub fn class_score(&self, class: usize) -> Result<Var<'t>> {
        let pick = |v: Var<'t>| -> Result<Var<'t>> {
            let n = v.numel();
            if class >= n {
                return Err(Error::Index {
                    table: "classes".into(),
                    index: class,
                    size: n,
                });
            }
            Ok(v.reshape([1, n])?.slice_cols(class, 1)?.sum())
        };
        match self {
            ModelOutput::Logits(z) => pick(*z),
            ModelOutput::Fused { probs, .. } => Ok(pick(*probs)?.ln()),
        }
    }
}

/// Text side of a forward pass. `mask` marks real (non-padding) tokens.
#[derive(Debug, Clone, Copy)]
pub struct TextInput<'a> {
    pub tokens: &'a [u32],
    pub mask: Option<&'a [bool]>,
}

impl<'a> TextInput<'a> {
    pub fn new(tokens: &'a [u32]) -> Self {
        Self { tokens, mask: None }
    }

    fn keep(&self) -> Vec<bool> {
        self.mask
            .map_or_else(|| vec![true; self.tokens.len()], <[bool]>::to_vec)
    }

    fn real_len(&self) -> usize {
        self.mask
            .map_or(self.tokens.len(), |m| m.iter().filter(|&&k| k).count())
    }
}

/// Token + learned position embeddings followed by a layer norm.
#[derive(Debug, Clone)]
struct TextEmbedder {
    token: EmbeddingTable,
    position: EmbeddingTable,
    norm: LayerNorm,
}

impl TextEmbedder {
    fn new(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        Self {
            token: EmbeddingTable::new(store, "text.token", cfg.vocab_size, cfg.model_dim, rng),
            position: EmbeddingTable::new(store, "text.position", cfg.max_text_len, cfg.model_dim, rng),
            norm: LayerNorm::new(store, "text.norm", cfg.model_dim),
        }
    }

    fn forward<'t>(&self, tape: &'t Tape, store: &ParamStore, text: &TextInput<'_>) -> Result<Var<'t>> {
        check_text(text, self.position.vocab_size)?;
        let ids: Vec<usize> = text.tokens.iter().map(|&t| t as usize).collect();
        let pos: Vec<usize> = (0..ids.len()).collect();
        let tok = self.token.lookup(tape, store, &ids)?;
        let pos = self.position.lookup(tape, store, &pos)?;
        self.norm.forward(tape, store, tok.add(&pos)?)
    }
}

fn check_text(text: &TextInput<'_>, limit: usize) -> Result<()> {
    if let Some(m) = text.mask {
        if m.len() != text.tokens.len() {
            return Err(Error::Shape {
                op: "text_mask",
                lhs: vec![text.tokens.len()],
                rhs: vec![m.len()],
            });
        }
    }
    if text.real_len() == 0 {
        return Err(Error::invalid("caption has no tokens"));
    }
    if text.tokens.len() > limit {
        return Err(Error::SequenceOverflow {
            len: text.tokens.len(),
            limit,
        });
    }
    Ok(())
}

#[derive(Debug, Clone)]
enum Arch {
    Early(early::EarlyFusion),
    Dual(dual::DualStream),
    Single(single::SingleStream),
    Image(image_only::ImageOnly),
}

/// A classifier: configuration, parameters and architecture wiring.
#[derive(Debug, Clone)]
pub struct Model {
    config: ModelConfig,
    params: ParamStore,
    arch: Arch,
}

impl Model {
    /// Builds a freshly initialized model; initialization draws from the
    /// `init` stream of `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = seed::stream(seed, "init");
        let mut params = ParamStore::new();
        let arch = match config.family {
            Family::EarlyFusionAvg | Family::EarlyFusionFirst => {
                Arch::Early(early::EarlyFusion::new(&mut params, &config, &mut rng)?)
            }
            Family::DualStreamLateFusion => Arch::Dual(dual::DualStream::new(&mut params, &config, &mut rng)?),
            Family::SingleStreamBitransformer => {
                Arch::Single(single::SingleStream::new(&mut params, &config, &mut rng)?)
            }
            Family::ImageOnlyMlp => Arch::Image(image_only::ImageOnly::new(&mut params, &config, &mut rng)),
        };
        Ok(Self { config, params, arch })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn family(&self) -> Family {
        self.config.family
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Whether the model reads region features at all.
    pub fn uses_regions(&self) -> bool {
        self.config.num_regions > 0
    }

    /// Forward pass over explicit inputs. `regions` is `[r, region_dim]`.
    pub fn forward<'t>(
        &self,
        tape: &'t Tape,
        text: TextInput<'_>,
        regions: Var<'t>,
        ctx: &mut ForwardCtx<'_>,
    ) -> Result<ModelOutput<'t>> {
        let shape = regions.shape();
        if shape.len() != 2 || shape[1] != self.config.region_feature_dim {
            return Err(Error::Shape {
                op: "region_features",
                lhs: shape,
                rhs: vec![self.config.num_regions, self.config.region_feature_dim],
            });
        }
        if self.uses_regions() && shape[0] == 0 {
            return Err(Error::invalid("model needs at least one region"));
        }
        let p = &self.params;
        match &self.arch {
            Arch::Early(m) => m.forward(tape, p, &text, regions, ctx).map(ModelOutput::Logits),
            Arch::Dual(m) => m.forward(tape, p, &text, regions, ctx),
            Arch::Single(m) => m.forward(tape, p, &text, regions, ctx).map(ModelOutput::Logits),
            Arch::Image(m) => m.forward(tape, p, regions).map(ModelOutput::Logits),
        }
    }

    /// Forward pass on a sample's caption and its top-k regions. Returns the
    /// region leaf alongside the output so callers can differentiate with
    /// respect to it.
    pub fn forward_sample<'t>(
        &self,
        tape: &'t Tape,
        sample: &MultimodalSample,
        ctx: &mut ForwardCtx<'_>,
    ) -> Result<(ModelOutput<'t>, Var<'t>)> {
        let regions = tape.input(&sample.top_regions(self.config.num_regions)?);
        let out = self.forward(tape, TextInput::new(&sample.caption_token_ids), regions, ctx)?;
        Ok((out, regions))
    }

    /// Training loss for one sample. Late-fusion models add the per-stream
    /// losses to the loss on the fused distribution.
    pub fn loss<'t>(&self, output: &ModelOutput<'t>, sample: &MultimodalSample, cfg: &LossConfig) -> Result<Var<'t>> {
        let k = self.config.num_classes;
        let eps = self.config.label_smoothing;
        let on_logits = |z: Var<'t>| match cfg.kind {
            LossKind::LabelSmoothedCe => losses::label_smoothed_ce(z, sample.label, eps, k),
            LossKind::KlToAnnotator => losses::kl_to_annotator(z, &sample.distribution, cfg.kl_direction),
        };
        match output {
            ModelOutput::Logits(z) => on_logits(*z),
            ModelOutput::Fused {
                probs,
                image_logits,
                text_logits,
                ..
            } => {
                let fused = match cfg.kind {
                    LossKind::LabelSmoothedCe => {
                        losses::cross_entropy_probs(*probs, &losses::smoothed_target(sample.label, eps, k)?)?
                    }
                    LossKind::KlToAnnotator => losses::kl_probs(*probs, &sample.distribution)?,
                };
                fused.add(&on_logits(*image_logits)?)?.add(&on_logits(*text_logits)?)
            }
        }
    }

    /// Class probabilities in evaluation mode.
    pub fn predict_proba(&self, sample: &MultimodalSample) -> Result<Vec<f64>> {
        let tape = Tape::new();
        let (out, _) = self.forward_sample(&tape, sample, &mut ForwardCtx::eval())?;
        Ok(out.probabilities()?.value().to_vec())
    }

    /// Predicted class: the argmax of the class probabilities.
    pub fn predict(&self, sample: &MultimodalSample) -> Result<usize> {
        Ok(losses::argmax(&self.predict_proba(sample)?))
    }

    /// For late-fusion models, the current `(w1, w2)`.
    pub fn fusion_weights(&self) -> Option<(f64, f64)> {
        match &self.arch {
            Arch::Dual(d) => Some(d.current_weights(&self.params)),
            _ => None,
        }
    }
}
