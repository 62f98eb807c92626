use rand_chacha::ChaCha8Rng;

use super::{ModelConfig, ModelOutput, TextEmbedder, TextInput};
use crate::error::Result;
use crate::nn::{self, AttentionMask, EncoderLayer, FcHead, ForwardCtx, LayerNorm, Linear};
use crate::params::{ParamId, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
enum Fusion {
    /// Softmax over two learned scalars.
    Learned(ParamId),
    Fixed(f64, f64),
}

/// Image-guided stream (region queries over text keys/values) and
/// text-guided stream (the converse), each pooled and classified, fused as
/// `w1 * p_img + w2 * p_txt`. The two streams do not share parameters.
#[derive(Debug, Clone)]
pub(super) struct DualStream {
    text: TextEmbedder,
    region_proj: Linear,
    region_norm: LayerNorm,
    image_layers: Vec<EncoderLayer>,
    text_layers: Vec<EncoderLayer>,
    image_head: FcHead,
    text_head: FcHead,
    fusion: Fusion,
}

impl DualStream {
    pub(super) fn new(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        let weights = cfg.fusion_weights()?;
        let text = TextEmbedder::new(store, cfg, rng);
        let region_proj = Linear::new(store, "region.proj", cfg.region_feature_dim, cfg.model_dim, rng);
        let region_norm = LayerNorm::new(store, "region.norm", cfg.model_dim);
        let stack = |store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str| {
            (0..cfg.encoder_layers)
                .map(|i| {
                    EncoderLayer::new(
                        store,
                        &format!("{name}.layer{i}"),
                        cfg.model_dim,
                        cfg.heads,
                        cfg.ff_dim,
                        cfg.dropout,
                        rng,
                    )
                })
                .collect::<Result<Vec<_>>>()
        };
        let image_layers = stack(store, rng, "image_guided")?;
        let text_layers = stack(store, rng, "text_guided")?;
        let image_head = FcHead::new(
            store,
            "image_guided.head",
            cfg.model_dim,
            cfg.head_hidden_dim,
            cfg.num_classes,
            rng,
        );
        let text_head = FcHead::new(
            store,
            "text_guided.head",
            cfg.model_dim,
            cfg.head_hidden_dim,
            cfg.num_classes,
            rng,
        );
        let fusion = if cfg.fusion.trainable {
            // softmax(ln w) recovers the initial weights; clamp zeros to a finite logit
            let logit = |w: f64| w.max(1e-12).ln();
            let init = Tensor::new([2], vec![logit(weights.w1()), logit(weights.w2())])?;
            Fusion::Learned(store.add("fusion.logits", init))
        } else {
            Fusion::Fixed(weights.w1(), weights.w2())
        };
        Ok(Self {
            text,
            region_proj,
            region_norm,
            image_layers,
            text_layers,
            image_head,
            text_head,
            fusion,
        })
    }

    pub(super) fn current_weights(&self, store: &ParamStore) -> (f64, f64) {
        match self.fusion {
            Fusion::Fixed(a, b) => (a, b),
            Fusion::Learned(id) => {
                let z = store.get(id).data();
                let m = z[0].max(z[1]);
                let (a, b) = ((z[0] - m).exp(), (z[1] - m).exp());
                (a / (a + b), b / (a + b))
            }
        }
    }

    pub(super) fn forward<'t>(
        &self,
        tape: &'t Tape,
        store: &ParamStore,
        text: &TextInput<'_>,
        regions: Var<'t>,
        ctx: &mut ForwardCtx<'_>,
    ) -> Result<ModelOutput<'t>> {
        let keep = text.keep();
        let text_emb = self.text.forward(tape, store, text)?;
        let region_emb = self
            .region_norm
            .forward(tape, store, self.region_proj.forward(tape, store, regions)?)?;
        let n_regions = region_emb.shape()[0];

        let to_text = AttentionMask::from_key_padding(n_regions, &keep)?;
        let mut img = region_emb;
        for layer in &self.image_layers {
            img = layer.forward(tape, store, img, Some(text_emb), Some(&to_text), ctx)?;
        }
        let image_logits = self.image_head.forward(tape, store, nn::pool_average(img, None)?)?;

        let mut txt = text_emb;
        for layer in &self.text_layers {
            txt = layer.forward(tape, store, txt, Some(region_emb), None, ctx)?;
        }
        let text_logits = self
            .text_head
            .forward(tape, store, nn::pool_average(txt, Some(&keep))?)?;

        let image_probs = image_logits.softmax()?;
        let text_probs = text_logits.softmax()?;
        let probs = match self.fusion {
            Fusion::Fixed(w1, w2) => image_probs.scale(w1).add(&text_probs.scale(w2))?,
            Fusion::Learned(id) => {
                let w = tape.param(store, id).reshape([1, 2])?.softmax()?;
                let w1 = w.slice_cols(0, 1)?;
                let w2 = w.slice_cols(1, 1)?;
                image_probs.scale_by(&w1)?.add(&text_probs.scale_by(&w2)?)?
            }
        };
        Ok(ModelOutput::Fused {
            probs,
            image_logits,
            text_logits,
            image_probs,
            text_probs,
        })
    }
}
