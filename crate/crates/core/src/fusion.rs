//! Cross-pyramid fusion.
//!
//! Every pyramid level is embedded per time step (channels folded into the
//! batch axis), then fused by a block of two cross-attentions (temporal
//! queries over frequency keys and the reverse) followed by a joint
//! feed-forward network over the concatenated streams. Levels are processed
//! from the coarsest to the finest; each finer level adds the upsampled output
//! of the level below it to its own embeddings before fusing.

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::{Real, Tensor, Var};
use crate::params::{AttentionRecord, LayerNormParams, Linear, ParamId, ParamStore, Session};

/// Hyperparameters shared by every fusion level.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FusionConfig {
    pub seq_len: usize,
    pub levels: usize,
    pub d_model: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub dropout: f64,
    /// `false` replaces both cross-attentions by identity.
    pub cross_attention: bool,
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::Config(vec![format!(
                "model.d_model = {} must be divisible by model.heads = {}",
                self.d_model, self.heads
            )]));
        }
        Ok(())
    }

    pub fn level_len(&self, s: usize) -> usize {
        self.seq_len >> s
    }
}

/// Scale-specific affine `1 -> d_model` plus learned positional encoding.
#[derive(Clone, Copy, Debug)]
pub struct ScaleEmbedding {
    pub proj: Linear,
    pub position: ParamId,
}

impl ScaleEmbedding {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        prefix: &str,
        len: usize,
        d_model: usize,
        rng: &mut R,
    ) -> Self {
        let proj = Linear::new(store, &format!("{prefix}.proj"), 1, d_model, rng);
        let position = store.add(
            format!("{prefix}.position"),
            Tensor::randn(vec![len, d_model], 0.02, rng),
        );
        Self { proj, position }
    }
}

/// `(B, L_s, C)` level to `(B*C, L_s, d_model)` hidden states.
pub fn embed_scale<T: Real>(sess: &mut Session<'_, T>, level: Var, emb: &ScaleEmbedding) -> Result<Var> {
    let shape = sess.tape.shape(level).to_vec();
    let pos_shape = sess.params().get(emb.position).shape().to_vec();
    if shape.len() != 3 || shape[1] != pos_shape[0] {
        return Err(Error::Contract(format!(
            "embed_scale: level shape {shape:?} does not match positional table {pos_shape:?}"
        )));
    }
    let (b, l, c) = (shape[0], shape[1], shape[2]);
    let series = sess.tape.permute(level, &[0, 2, 1])?;
    let column = sess.tape.reshape(series, vec![b * c, l, 1])?;
    let hidden = emb.proj.forward(sess, column)?;
    let pos = sess.param(emb.position);
    sess.tape.add(hidden, pos)
}

/// Multi-head attention projections.
#[derive(Clone, Copy, Debug)]
pub struct CrossAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub heads: usize,
}

impl CrossAttention {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        prefix: &str,
        d_model: usize,
        heads: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            query: Linear::new(store, &format!("{prefix}.query"), d_model, d_model, rng),
            key: Linear::new(store, &format!("{prefix}.key"), d_model, d_model, rng),
            value: Linear::new(store, &format!("{prefix}.value"), d_model, d_model, rng),
            output: Linear::new(store, &format!("{prefix}.output"), d_model, d_model, rng),
            heads,
        }
    }

    pub fn num_scalars(&self) -> usize {
        [self.query, self.key, self.value, self.output]
            .iter()
            .map(Linear::num_scalars)
            .sum()
    }
}

/// Where an attention call sits, for the debug probe.
#[derive(Clone, Copy, Debug)]
pub struct AttentionSite {
    pub scale: usize,
    pub query_stream: &'static str,
}

/// Scaled dot-product attention of `q_seq` over `kv_seq`, both `(B', L, d)`.
pub fn cross_attention<T: Real>(
    sess: &mut Session<'_, T>,
    q_seq: Var,
    kv_seq: Var,
    attn: &CrossAttention,
    dropout: f64,
    site: Option<AttentionSite>,
) -> Result<Var> {
    let qs = sess.tape.shape(q_seq).to_vec();
    let ks = sess.tape.shape(kv_seq).to_vec();
    if qs.len() != 3 || ks.len() != 3 || qs[0] != ks[0] || qs[2] != ks[2] {
        return Err(Error::dims("cross_attention", &qs, &ks));
    }
    let (batch, lq, d) = (qs[0], qs[1], qs[2]);
    let lk = ks[1];
    let h = attn.heads;
    if h == 0 || d % h != 0 {
        return Err(Error::Config(vec![format!(
            "cross_attention: d_model {d} is not divisible by {h} heads"
        )]));
    }
    let dh = d / h;

    let q = attn.query.forward(sess, q_seq)?;
    let k = attn.key.forward(sess, kv_seq)?;
    let v = attn.value.forward(sess, kv_seq)?;
    let q = sess.tape.reshape(q, vec![batch, lq, h, dh])?;
    let q = sess.tape.permute(q, &[0, 2, 1, 3])?;
    let k = sess.tape.reshape(k, vec![batch, lk, h, dh])?;
    let k = sess.tape.permute(k, &[0, 2, 3, 1])?;
    let v = sess.tape.reshape(v, vec![batch, lk, h, dh])?;
    let v = sess.tape.permute(v, &[0, 2, 1, 3])?;

    let scores = sess.tape.matmul(q, k)?;
    let scores = sess.tape.scale(scores, 1.0 / (dh as f64).sqrt());
    let weights = sess.tape.softmax(scores, 3)?;
    if let Some(site) = site {
        let w = sess.tape.value(weights).clone();
        if let Some(probe) = sess.probe_mut() {
            probe.attention.push(AttentionRecord {
                scale: site.scale,
                query_stream: site.query_stream,
                weights: w,
            });
        }
    }
    let weights = sess.dropout(weights, dropout)?;
    let mixed = sess.tape.matmul(weights, v)?;
    let mixed = sess.tape.permute(mixed, &[0, 2, 1, 3])?;
    let mixed = sess.tape.reshape(mixed, vec![batch, lq, d])?;
    attn.output.forward(sess, mixed)
}

/// Parameters of one cross-pyramid fusion block.
#[derive(Clone, Debug)]
pub struct FusionBlock {
    /// `None` when cross-attention is ablated.
    pub attention: Option<(CrossAttention, CrossAttention)>,
    pub norm_t: LayerNormParams,
    pub norm_f: LayerNormParams,
    pub ffn_in: Linear,
    pub ffn_out: Linear,
    pub norm_out: LayerNormParams,
}

impl FusionBlock {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        prefix: &str,
        cfg: &FusionConfig,
        rng: &mut R,
    ) -> Self {
        let d = cfg.d_model;
        let attention = cfg.cross_attention.then(|| {
            (
                CrossAttention::new(store, &format!("{prefix}.attn_t"), d, cfg.heads, rng),
                CrossAttention::new(store, &format!("{prefix}.attn_f"), d, cfg.heads, rng),
            )
        });
        Self {
            attention,
            norm_t: LayerNormParams::new(store, &format!("{prefix}.norm_t"), d),
            norm_f: LayerNormParams::new(store, &format!("{prefix}.norm_f"), d),
            ffn_in: Linear::new(store, &format!("{prefix}.ffn_in"), 2 * d, cfg.d_ff, rng),
            ffn_out: Linear::new(store, &format!("{prefix}.ffn_out"), cfg.d_ff, 2 * d, rng),
            norm_out: LayerNormParams::new(store, &format!("{prefix}.norm_out"), 2 * d),
        }
    }
}

/// One fusion step at scale `scale`; returns the updated `(temporal, frequency)` pair.
pub fn fusion_block<T: Real>(
    sess: &mut Session<'_, T>,
    h_t: Var,
    h_f: Var,
    block: &FusionBlock,
    dropout: f64,
    scale: usize,
) -> Result<(Var, Var)> {
    if sess.tape.shape(h_t) != sess.tape.shape(h_f) {
        return Err(Error::dims("fusion_block", sess.tape.shape(h_t), sess.tape.shape(h_f)));
    }
    let d = *sess.tape.shape(h_t).last().expect("rank 3");
    let (enriched_t, enriched_f) = match &block.attention {
        Some((attn_t, attn_f)) => {
            let site_t = AttentionSite {
                scale,
                query_stream: "temporal",
            };
            let site_f = AttentionSite {
                scale,
                query_stream: "frequency",
            };
            let ct = cross_attention(sess, h_t, h_f, attn_t, dropout, Some(site_t))?;
            let cf = cross_attention(sess, h_f, h_t, attn_f, dropout, Some(site_f))?;
            (sess.tape.add(h_t, ct)?, sess.tape.add(h_f, cf)?)
        }
        None => (h_t, h_f),
    };
    let ht = block.norm_t.forward(sess, enriched_t)?;
    let hf = block.norm_f.forward(sess, enriched_f)?;

    let joint = sess.tape.concat(&[ht, hf], 2)?;
    let hidden = block.ffn_in.forward(sess, joint)?;
    let hidden = sess.tape.gelu(hidden);
    let hidden = sess.dropout(hidden, dropout)?;
    let update = block.ffn_out.forward(sess, hidden)?;
    let fused = sess.tape.add(joint, update)?;
    let fused = block.norm_out.forward(sess, fused)?;
    let out_t = sess.tape.narrow(fused, 2, 0, d)?;
    let out_f = sess.tape.narrow(fused, 2, d, d)?;
    Ok((out_t, out_f))
}

/// Embeddings and fusion blocks for every level.
#[derive(Clone, Debug)]
pub struct FusionStack {
    pub config: FusionConfig,
    /// Per level: (temporal embedding, frequency embedding).
    pub embeddings: Vec<(ScaleEmbedding, ScaleEmbedding)>,
    pub blocks: Vec<FusionBlock>,
}

impl FusionStack {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        cfg: FusionConfig,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let mut embeddings = Vec::with_capacity(cfg.levels);
        let mut blocks = Vec::with_capacity(cfg.levels);
        for s in 0..cfg.levels {
            let len = cfg.level_len(s);
            embeddings.push((
                ScaleEmbedding::new(store, &format!("scale{s}.embed_t"), len, cfg.d_model, rng),
                ScaleEmbedding::new(store, &format!("scale{s}.embed_f"), len, cfg.d_model, rng),
            ));
            blocks.push(FusionBlock::new(store, &format!("scale{s}.block"), &cfg, rng));
        }
        Ok(Self {
            config: cfg,
            embeddings,
            blocks,
        })
    }
}

/// Runs the hierarchy from the coarsest level to the finest and returns the
/// fused temporal stream at level 0, `(B*C, L_in, d_model)`.
///
/// `levels[s]` holds the `(temporal, frequency)` inputs of scale `s`, each
/// `(B, L_in / 2^s, C)`.
pub fn coarse_to_fine<T: Real>(
    sess: &mut Session<'_, T>,
    levels: &[(Var, Var)],
    stack: &FusionStack,
) -> Result<Var> {
    let cfg = &stack.config;
    if levels.len() != cfg.levels {
        return Err(Error::Contract(format!(
            "coarse_to_fine: {} pyramid levels for a {}-level fusion stack",
            levels.len(),
            cfg.levels
        )));
    }
    let mut carry: Option<(Var, Var)> = None;
    for s in (0..cfg.levels).rev() {
        let (emb_t, emb_f) = &stack.embeddings[s];
        let mut h_t = embed_scale(sess, levels[s].0, emb_t)?;
        let mut h_f = embed_scale(sess, levels[s].1, emb_f)?;
        if let Some((prev_t, prev_f)) = carry {
            let len = cfg.level_len(s);
            let up_t = sess.tape.upsample(prev_t, len)?;
            let up_f = sess.tape.upsample(prev_f, len)?;
            h_t = sess.tape.add(h_t, up_t)?;
            h_f = sess.tape.add(h_f, up_f)?;
        }
        let (out_t, out_f) = fusion_block(sess, h_t, h_f, &stack.blocks[s], cfg.dropout, s)?;
        if sess.probe_mut().is_some() {
            let (vt, vf) = (sess.tape.value(out_t).clone(), sess.tape.value(out_f).clone());
            if let Some(probe) = sess.probe_mut() {
                probe.fused.push((s, vt, vf));
            }
        }
        carry = Some((out_t, out_f));
    }
    Ok(carry.expect("at least one level").0)
}
