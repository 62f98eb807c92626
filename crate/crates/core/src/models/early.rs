use rand_chacha::ChaCha8Rng;

use super::{Family, ModelConfig, TextEmbedder, TextInput};
use crate::error::Result;
use crate::nn::{self, AttentionMask, EncoderLayer, FcHead, ForwardCtx, Linear};
use crate::params::ParamStore;
use crate::tape::{concat_cols, Tape, Var};

/// Pooled text and pooled region embeddings, concatenated, then an FC head.
#[derive(Debug, Clone)]
pub(super) struct EarlyFusion {
    first_token: bool,
    text: TextEmbedder,
    text_layers: Vec<EncoderLayer>,
    region_proj: Linear,
    head: FcHead,
    dim: usize,
}

impl EarlyFusion {
    pub(super) fn new(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        let text = TextEmbedder::new(store, cfg, rng);
        let text_layers = (0..cfg.encoder_layers)
            .map(|i| {
                EncoderLayer::new(
                    store,
                    &format!("text.layer{i}"),
                    cfg.model_dim,
                    cfg.heads,
                    cfg.ff_dim,
                    cfg.dropout,
                    rng,
                )
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            first_token: cfg.family == Family::EarlyFusionFirst,
            text,
            text_layers,
            region_proj: Linear::new(store, "region.proj", cfg.region_feature_dim, cfg.model_dim, rng),
            head: FcHead::new(
                store,
                "head",
                2 * cfg.model_dim,
                cfg.head_hidden_dim,
                cfg.num_classes,
                rng,
            ),
            dim: cfg.model_dim,
        })
    }

    pub(super) fn forward<'t>(
        &self,
        tape: &'t Tape,
        store: &ParamStore,
        text: &TextInput<'_>,
        regions: Var<'t>,
        ctx: &mut ForwardCtx<'_>,
    ) -> Result<Var<'t>> {
        let keep = text.keep();
        let mut h = self.text.forward(tape, store, text)?;
        if !self.text_layers.is_empty() {
            let mask = AttentionMask::from_key_padding(keep.len(), &keep)?;
            for layer in &self.text_layers {
                h = layer.forward(tape, store, h, None, Some(&mask), ctx)?;
            }
        }
        let text_vec = if self.first_token {
            nn::pool_first_token(h)?
        } else {
            nn::pool_average(h, Some(&keep))?
        };
        let r = self.region_proj.forward(tape, store, regions)?;
        let region_vec = nn::pool_average(r, None)?;
        let joined = concat_cols(&[text_vec.reshape([1, self.dim])?, region_vec.reshape([1, self.dim])?])?;
        self.head.forward(tape, store, joined)
    }
}
