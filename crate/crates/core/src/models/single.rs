use rand_chacha::ChaCha8Rng;

use super::{check_text, ModelConfig, TextInput};
use crate::data::CLS;
use crate::error::{Error, Result};
use crate::nn::{
    self, AttentionMask, EmbeddingTable, EmbeddingTables, EncoderLayer, FcHead, ForwardCtx, LayerNorm, Linear,
    SegmentId,
};
use crate::params::ParamStore;
use crate::tape::{concat_rows, Tape, Var};

/// One encoder over `[CLS] + projected regions + caption tokens`.
///
/// Inputs are the sum of token (or projected region), position and segment
/// embeddings. `[CLS]` and regions sit in segment 0 and text in segment 1.
/// Regions are unordered and all use position 0; text token `j` uses
/// position `j + 1`. The final `[CLS]` row feeds the classifier.
#[derive(Debug, Clone)]
pub(super) struct SingleStream {
    tables: EmbeddingTables,
    embed_norm: LayerNorm,
    region_proj: Option<Linear>,
    layers: Vec<EncoderLayer>,
    head: FcHead,
    num_regions: usize,
    max_text_len: usize,
}

impl SingleStream {
    pub(super) fn new(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        let d = cfg.model_dim;
        let tables = EmbeddingTables {
            token: EmbeddingTable::new(store, "embed.token", cfg.vocab_size, d, rng),
            position: EmbeddingTable::new(store, "embed.position", cfg.max_text_len + 1, d, rng),
            segment: EmbeddingTable::new(store, "embed.segment", 2, d, rng),
        };
        let embed_norm = LayerNorm::new(store, "embed.norm", d);
        let region_proj =
            (cfg.num_regions > 0).then(|| Linear::new(store, "region.proj", cfg.region_feature_dim, d, rng));
        let layers = (0..cfg.encoder_layers)
            .map(|i| {
                EncoderLayer::new(
                    store,
                    &format!("encoder.layer{i}"),
                    d,
                    cfg.heads,
                    cfg.ff_dim,
                    cfg.dropout,
                    rng,
                )
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            tables,
            embed_norm,
            region_proj,
            layers,
            head: FcHead::new(store, "head", d, cfg.head_hidden_dim, cfg.num_classes, rng),
            num_regions: cfg.num_regions,
            max_text_len: cfg.max_text_len,
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
        let n_regions = regions.shape()[0];
        let len = 1 + n_regions + text.tokens.len();
        let limit = 1 + self.num_regions + self.max_text_len;
        if len > limit || n_regions > self.num_regions {
            return Err(Error::SequenceOverflow { len, limit });
        }
        check_text(text, self.max_text_len)?;

        let text_len = text.tokens.len();
        let ids: Vec<usize> = std::iter::once(CLS as usize)
            .chain(text.tokens.iter().map(|&t| t as usize))
            .collect();
        let positions: Vec<usize> = (0..=text_len).collect();
        let segments: Vec<SegmentId> = std::iter::once(SegmentId::Image)
            .chain(std::iter::repeat_n(SegmentId::Text, text_len))
            .collect();
        let cls_and_text = nn::embed_sequence(tape, store, &ids, &positions, &segments, &self.tables)?;

        let seq = match (&self.region_proj, n_regions) {
            (Some(proj), r) if r > 0 => {
                let pos0 = self.tables.position.lookup(tape, store, &[0])?;
                let seg0 = self.tables.segment.lookup(tape, store, &[SegmentId::Image as usize])?;
                let offset = pos0.add(&seg0)?;
                let region_emb = proj.forward(tape, store, regions)?.add_row(&offset)?;
                let rest: Vec<usize> = (1..=text_len).collect();
                concat_rows(&[cls_and_text.rows(&[0])?, region_emb, cls_and_text.rows(&rest)?])?
            }
            _ => cls_and_text,
        };
        let mut h = self.embed_norm.forward(tape, store, seq)?;

        let mut keep = vec![true; 1 + n_regions];
        keep.extend(text.keep());
        let mask = AttentionMask::from_key_padding(keep.len(), &keep)?;
        for layer in &self.layers {
            h = layer.forward(tape, store, h, None, Some(&mask), ctx)?;
        }
        self.head.forward(tape, store, nn::pool_first_token(h)?)
    }
}
