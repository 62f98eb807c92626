//! Building blocks shared by the classifier families: embeddings, multi-head
//! attention, feed-forward sublayers, post-norm encoder layers and pooling.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::params::{self, ParamId, ParamStore};
use crate::tape::{concat_cols, Tape, Var};

/// Additive bias used for masked attention scores.
pub const MASK_BIAS: f64 = -1e9;
pub const LAYER_NORM_EPS: f64 = 1e-12;

/// Per-call forward state: training flag and the dropout stream.
pub struct ForwardCtx<'r> {
    pub training: bool,
    rng: Option<&'r mut ChaCha8Rng>,
}

impl<'r> ForwardCtx<'r> {
    pub fn eval() -> Self {
        Self {
            training: false,
            rng: None,
        }
    }

    pub fn train(rng: &'r mut ChaCha8Rng) -> Self {
        Self {
            training: true,
            rng: Some(rng),
        }
    }
}

/// Inverted dropout: identity unless training, otherwise zeroes entries with
/// probability `p` and scales survivors by `1 / (1 - p)`.
pub fn dropout<'t>(x: Var<'t>, p: f64, ctx: &mut ForwardCtx<'_>) -> Result<Var<'t>> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::invalid(format!("dropout probability {p} not in [0, 1)")));
    }
    if !ctx.training || p == 0.0 {
        return Ok(x);
    }
    let rng = ctx
        .rng
        .as_deref_mut()
        .ok_or_else(|| Error::invalid("training forward pass without a dropout rng"))?;
    let keep = 1.0 / (1.0 - p);
    let mask = (0..x.numel())
        .map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep })
        .collect();
    x.mul_const(mask)
}

/// Segment ids distinguishing the two modalities in a joint sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SegmentId {
    Image = 0,
    Text = 1,
}

impl TryFrom<u32> for SegmentId {
    type Error = Error;

    fn try_from(v: u32) -> Result<Self> {
        match v {
            0 => Ok(SegmentId::Image),
            1 => Ok(SegmentId::Text),
            _ => Err(Error::Index {
                table: "segment".into(),
                index: v as usize,
                size: 2,
            }),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) -> Self {
        let weight = store.add(format!("{name}.weight"), params::glorot(rng, fan_in, fan_out));
        let bias = store.add(format!("{name}.bias"), params::filled([fan_out], 0.0));
        Self {
            weight,
            bias: Some(bias),
            fan_in,
            fan_out,
        }
    }

    /// `x @ W` with no bias term.
    pub fn without_bias(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let weight = store.add(format!("{name}.weight"), params::glorot(rng, fan_in, fan_out));
        Self {
            weight,
            bias: None,
            fan_in,
            fan_out,
        }
    }

    /// `x @ W + b` for `x` of shape `[rows, fan_in]` (or a `[fan_in]` vector,
    /// which yields `[1, fan_out]`).
    pub fn forward<'t>(&self, tape: &'t Tape, store: &ParamStore, x: Var<'t>) -> Result<Var<'t>> {
        let x = if x.shape().len() == 1 {
            x.reshape([1, x.numel()])?
        } else {
            x
        };
        let y = x.matmul(&tape.param(store, self.weight))?;
        match self.bias {
            Some(b) => y.add_row(&tape.param(store, b)),
            None => Ok(y),
        }
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        Self {
            gain: store.add(format!("{name}.gain"), params::filled([dim], 1.0)),
            bias: store.add(format!("{name}.bias"), params::filled([dim], 0.0)),
        }
    }

    pub fn forward<'t>(&self, tape: &'t Tape, store: &ParamStore, x: Var<'t>) -> Result<Var<'t>> {
        x.layer_norm(
            &tape.param(store, self.gain),
            &tape.param(store, self.bias),
            LAYER_NORM_EPS,
        )
    }
}

/// Lookup table of learned vectors.
#[derive(Debug, Clone)]
pub struct EmbeddingTable {
    pub name: String,
    pub vocab_size: usize,
    pub dim: usize,
    pub weights: ParamId,
}

impl EmbeddingTable {
    pub fn new(store: &mut ParamStore, name: &str, vocab_size: usize, dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let weights = store.add(format!("{name}.weights"), params::uniform(rng, [vocab_size, dim], 0.1));
        Self {
            name: name.to_string(),
            vocab_size,
            dim,
            weights,
        }
    }

    pub fn lookup<'t>(&self, tape: &'t Tape, store: &ParamStore, ids: &[usize]) -> Result<Var<'t>> {
        if let Some(&bad) = ids.iter().find(|&&i| i >= self.vocab_size) {
            return Err(Error::Index {
                table: self.name.clone(),
                index: bad,
                size: self.vocab_size,
            });
        }
        tape.param(store, self.weights).rows(ids)
    }
}

/// The three tables summed to form BERT-style input embeddings.
#[derive(Debug, Clone)]
pub struct EmbeddingTables {
    pub token: EmbeddingTable,
    pub position: EmbeddingTable,
    pub segment: EmbeddingTable,
}

/// Sum of token, position and segment embeddings, one row per position.
pub fn embed_sequence<'t>(
    tape: &'t Tape,
    store: &ParamStore,
    token_ids: &[usize],
    position_ids: &[usize],
    segment_ids: &[SegmentId],
    tables: &EmbeddingTables,
) -> Result<Var<'t>> {
    if token_ids.len() != position_ids.len() || token_ids.len() != segment_ids.len() {
        return Err(Error::Shape {
            op: "embed_sequence",
            lhs: vec![token_ids.len(), position_ids.len()],
            rhs: vec![segment_ids.len()],
        });
    }
    let seg: Vec<usize> = segment_ids.iter().map(|s| *s as usize).collect();
    let tok = tables.token.lookup(tape, store, token_ids)?;
    let pos = tables.position.lookup(tape, store, position_ids)?;
    let seg = tables.segment.lookup(tape, store, &seg)?;
    tok.add(&pos)?.add(&seg)
}

/// Keep/ignore flags for every (query, key) pair.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMask {
    queries: usize,
    keys: usize,
    keep: Vec<bool>,
}

impl AttentionMask {
    pub fn new(queries: usize, keys: usize, keep: Vec<bool>) -> Result<Self> {
        if keep.len() != queries * keys {
            return Err(Error::Shape {
                op: "attention_mask",
                lhs: vec![queries, keys],
                rhs: vec![keep.len()],
            });
        }
        for q in 0..queries {
            if !keep[q * keys..(q + 1) * keys].iter().any(|&k| k) {
                return Err(Error::invalid(format!("attention mask row {q} keeps no keys")));
            }
        }
        Ok(Self { queries, keys, keep })
    }

    pub fn all(queries: usize, keys: usize) -> Self {
        Self {
            queries,
            keys,
            keep: vec![true; queries * keys],
        }
    }

    /// Same key-padding flags for every query.
    pub fn from_key_padding(queries: usize, key_keep: &[bool]) -> Result<Self> {
        let keys = key_keep.len();
        let keep = (0..queries).flat_map(|_| key_keep.iter().copied()).collect();
        Self::new(queries, keys, keep)
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.queries, self.keys)
    }

    pub fn keeps(&self, q: usize, k: usize) -> bool {
        self.keep[q * self.keys + k]
    }

    fn additive(&self) -> Vec<f64> {
        self.keep.iter().map(|&k| if k { 0.0 } else { MASK_BIAS }).collect()
    }
}

/// Multi-head scaled dot-product attention with learned projections.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub heads: usize,
    pub dim: usize,
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
}

impl MultiHeadAttention {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, heads: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(Error::config(format!("model dim {dim} not divisible by {heads} heads")));
        }
        Ok(Self {
            heads,
            dim,
            query: Linear::new(store, &format!("{name}.query"), dim, dim, rng),
            key: Linear::without_bias(store, &format!("{name}.key"), dim, dim, rng),
            value: Linear::new(store, &format!("{name}.value"), dim, dim, rng),
            output: Linear::new(store, &format!("{name}.output"), dim, dim, rng),
        })
    }

    pub fn forward<'t>(
        &self,
        tape: &'t Tape,
        store: &ParamStore,
        q_input: Var<'t>,
        kv_input: Var<'t>,
        mask: Option<&AttentionMask>,
    ) -> Result<Var<'t>> {
        Ok(self.forward_with_weights(tape, store, q_input, kv_input, mask)?.0)
    }

    /// Like [`forward`](Self::forward) but also returns each head's
    /// `[Lq, Lk]` attention weights.
    pub fn forward_with_weights<'t>(
        &self,
        tape: &'t Tape,
        store: &ParamStore,
        q_input: Var<'t>,
        kv_input: Var<'t>,
        mask: Option<&AttentionMask>,
    ) -> Result<(Var<'t>, Vec<Var<'t>>)> {
        let lq = q_input.shape()[0];
        let lk = kv_input.shape()[0];
        if let Some(m) = mask {
            if m.shape() != (lq, lk) {
                return Err(Error::Shape {
                    op: "attention_mask",
                    lhs: vec![lq, lk],
                    rhs: vec![m.queries, m.keys],
                });
            }
        }
        let additive = mask.map(AttentionMask::additive);
        let q = self.query.forward(tape, store, q_input)?;
        let k = self.key.forward(tape, store, kv_input)?;
        let v = self.value.forward(tape, store, kv_input)?;
        let head_dim = self.dim / self.heads;
        let scale = 1.0 / (head_dim as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        let mut weights = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = q.slice_cols(h * head_dim, head_dim)?;
            let kh = k.slice_cols(h * head_dim, head_dim)?;
            let vh = v.slice_cols(h * head_dim, head_dim)?;
            let mut scores = qh.matmul(&kh.transpose()?)?.scale(scale);
            if let Some(add) = &additive {
                scores = scores.add_const(add)?;
            }
            let attn = scores.softmax()?;
            outs.push(attn.matmul(&vh)?);
            weights.push(attn);
        }
        let joined = if outs.len() == 1 { outs[0] } else { concat_cols(&outs)? };
        Ok((self.output.forward(tape, store, joined)?, weights))
    }
}

/// Position-wise `Linear -> GELU -> Linear`.
#[derive(Debug, Clone)]
pub struct FeedForward {
    pub inner: Linear,
    pub outer: Linear,
}

impl FeedForward {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, ff_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            inner: Linear::new(store, &format!("{name}.inner"), dim, ff_dim, rng),
            outer: Linear::new(store, &format!("{name}.outer"), ff_dim, dim, rng),
        }
    }

    pub fn forward<'t>(&self, tape: &'t Tape, store: &ParamStore, x: Var<'t>) -> Result<Var<'t>> {
        let h = self.inner.forward(tape, store, x)?.gelu();
        self.outer.forward(tape, store, h)
    }
}

/// Post-norm transformer encoder layer. With a separate key/value input it
/// acts as a cross-attention layer: queries come from the layer input,
/// keys and values from the other sequence.
#[derive(Debug, Clone)]
pub struct EncoderLayer {
    pub attention: MultiHeadAttention,
    pub attn_norm: LayerNorm,
    pub feed_forward: FeedForward,
    pub ff_norm: LayerNorm,
    pub dropout: f64,
}

impl EncoderLayer {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        ff_dim: usize,
        dropout: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        Ok(Self {
            attention: MultiHeadAttention::new(store, &format!("{name}.attention"), dim, heads, rng)?,
            attn_norm: LayerNorm::new(store, &format!("{name}.attn_norm"), dim),
            feed_forward: FeedForward::new(store, &format!("{name}.ff"), dim, ff_dim, rng),
            ff_norm: LayerNorm::new(store, &format!("{name}.ff_norm"), dim),
            dropout,
        })
    }

    pub fn forward<'t>(
        &self,
        tape: &'t Tape,
        store: &ParamStore,
        x: Var<'t>,
        kv: Option<Var<'t>>,
        mask: Option<&AttentionMask>,
        ctx: &mut ForwardCtx<'_>,
    ) -> Result<Var<'t>> {
        let a = self.attention.forward(tape, store, x, kv.unwrap_or(x), mask)?;
        let a = dropout(a, self.dropout, ctx)?;
        let h = self.attn_norm.forward(tape, store, x.add(&a)?)?;
        let f = self.feed_forward.forward(tape, store, h)?;
        let f = dropout(f, self.dropout, ctx)?;
        self.ff_norm.forward(tape, store, h.add(&f)?)
    }
}

/// Mean over the rows whose mask entry is `true` (all rows without a mask).
pub fn pool_average<'t>(x: Var<'t>, mask: Option<&[bool]>) -> Result<Var<'t>> {
    let rows = x.shape()[0];
    let keep: Vec<bool> = match mask {
        Some(m) if m.len() != rows => {
            return Err(Error::Shape {
                op: "pool_average",
                lhs: x.shape(),
                rhs: vec![m.len()],
            })
        }
        Some(m) => m.to_vec(),
        None => vec![true; rows],
    };
    let count = keep.iter().filter(|&&k| k).count();
    if count == 0 {
        return Err(Error::invalid("pool_average over a fully masked sequence"));
    }
    let summed = x.weighted_row_sum(keep.iter().map(|&k| if k { 1.0 } else { 0.0 }).collect())?;
    Ok(summed.scale(1.0 / count as f64))
}

/// Row 0 as a `[d]` vector.
pub fn pool_first_token<'t>(x: Var<'t>) -> Result<Var<'t>> {
    let shape = x.shape();
    if shape.first().copied().unwrap_or(0) == 0 {
        return Err(Error::invalid("pool_first_token over an empty sequence"));
    }
    x.rows(&[0])?.reshape([shape[1]])
}

/// Classification head: one ReLU hidden layer, then the output layer.
#[derive(Debug, Clone)]
pub struct FcHead {
    pub hidden: Linear,
    pub output: Linear,
}

impl FcHead {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        hidden: usize,
        classes: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        Self {
            hidden: Linear::new(store, &format!("{name}.hidden"), fan_in, hidden, rng),
            output: Linear::new(store, &format!("{name}.output"), hidden, classes, rng),
        }
    }

    /// Maps a `[fan_in]` vector to `[classes]` logits.
    pub fn forward<'t>(&self, tape: &'t Tape, store: &ParamStore, x: Var<'t>) -> Result<Var<'t>> {
        let h = self.hidden.forward(tape, store, x)?.relu();
        let out = self.output.forward(tape, store, h)?;
        out.reshape([self.output.fan_out])
    }
}
