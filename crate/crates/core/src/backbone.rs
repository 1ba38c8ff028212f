//! MAE-style encoder–decoder transformer over `[text | image-condition | generated]`.
//!
//! The encoder sees condition tokens plus the generated tokens that are already
//! known; the decoder sees the full sequence with a learned placeholder at every
//! hidden generated position. Both apply the policy mask in every layer. The
//! decoder output at generated positions is the conditioning vector `z` handed
//! to the diffusion head.

use candle_core::{DType, Device, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{ensure_finite, LayerNorm, Linear, Mlp, ParamStore, MASK_BIAS};
use crate::seqmask::{build_attention_mask, AttentionMask, AttentionPolicy, Segment, SegmentLayout};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    pub width: usize,
    pub depth_enc: usize,
    pub depth_dec: usize,
    pub heads: usize,
    /// Dimension of a generated-image token.
    pub token_dim: usize,
    /// Dimension of an image-condition token.
    pub cond_token_dim: usize,
    pub text_vocab_size: usize,
    pub max_text_len: usize,
    pub max_cond_len: usize,
    pub max_gen_len: usize,
    #[serde(default = "default_mlp_ratio")]
    pub mlp_ratio: usize,
}

fn default_mlp_ratio() -> usize {
    4
}

impl BackboneConfig {
    /// Width 256, 4 heads, 4 encoder and 4 decoder layers over the 16×16 shapes task.
    pub fn reference() -> Self {
        Self {
            width: 256,
            depth_enc: 4,
            depth_dec: 4,
            heads: 4,
            token_dim: 48,
            cond_token_dim: 16,
            text_vocab_size: 8,
            max_text_len: 4,
            max_cond_len: 16,
            max_gen_len: 16,
            mlp_ratio: 4,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("width", self.width),
            ("depth_enc", self.depth_enc),
            ("depth_dec", self.depth_dec),
            ("heads", self.heads),
            ("token_dim", self.token_dim),
            ("cond_token_dim", self.cond_token_dim),
            ("text_vocab_size", self.text_vocab_size),
            ("max_gen_len", self.max_gen_len),
            ("mlp_ratio", self.mlp_ratio),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("backbone.{name} must be at least 1")));
        }
        if self.width % self.heads != 0 {
            return Err(Error::Config(format!(
                "backbone.width {} is not divisible by {} heads",
                self.width, self.heads
            )));
        }
        Ok(())
    }
}

/// One batch of sequences plus which generated tokens are currently known.
#[derive(Debug, Clone)]
pub struct SequenceBatch {
    /// `B × T` text ids, row-major.
    pub text_ids: Vec<u32>,
    /// `B × C × cond_token_dim`.
    pub cond_tokens: Tensor,
    /// `B × G × token_dim`.
    pub gen_tokens: Tensor,
    /// `B × G`, true where the generated token is known.
    pub visible: Vec<bool>,
    /// Per sample: replace the text segment by the null embedding.
    pub null_text: Vec<bool>,
    /// Per sample: replace the image-condition segment by the null embedding.
    pub null_cond: Vec<bool>,
    pub layout: SegmentLayout,
    pub policy: AttentionPolicy,
}

impl SequenceBatch {
    /// Derives the layout from tensor extents and checks every shape.
    pub fn new(
        text_ids: Vec<u32>,
        cond_tokens: Tensor,
        gen_tokens: Tensor,
        visible: Vec<bool>,
        policy: AttentionPolicy,
    ) -> Result<Self> {
        let (b, g, _) = gen_tokens.dims3()?;
        let (cb, c, _) = cond_tokens.dims3()?;
        if cb != b {
            return Err(Error::Shape(format!("condition batch {cb} != generated batch {b}")));
        }
        if b == 0 || text_ids.len() % b != 0 {
            return Err(Error::Shape(format!(
                "{} text ids do not split into {b} rows",
                text_ids.len()
            )));
        }
        if visible.len() != b * g {
            return Err(Error::Shape(format!(
                "{} visibility flags for {b}x{g} generated tokens",
                visible.len()
            )));
        }
        let layout = SegmentLayout::new(text_ids.len() / b, c, g)?;
        Ok(Self {
            text_ids,
            cond_tokens,
            gen_tokens,
            visible,
            null_text: vec![false; b],
            null_cond: vec![false; b],
            layout,
            policy,
        })
    }

    pub fn batch_size(&self) -> usize {
        self.null_text.len()
    }

    pub fn with_null_conditions(mut self, null_text: Vec<bool>, null_cond: Vec<bool>) -> Result<Self> {
        if null_text.len() != self.batch_size() || null_cond.len() != self.batch_size() {
            return Err(Error::Shape("null-condition flags must have one entry per sample".into()));
        }
        self.null_text = null_text;
        self.null_cond = null_cond;
        Ok(self)
    }

    fn visible_row(&self, b: usize) -> &[bool] {
        let g = self.layout.gen_len();
        &self.visible[b * g..(b + 1) * g]
    }
}

/// Backbone forward result.
#[derive(Debug, Clone)]
pub struct BackboneOutput {
    /// `B × G × width` conditioning vectors.
    pub z: Tensor,
    /// `B × N × width` final decoder states at every position.
    pub hidden: Tensor,
    /// `B × cond_len × width` encoder outputs at condition positions, if any.
    pub encoder_cond: Option<Tensor>,
}

struct SelfAttention {
    qkv: Linear,
    proj: Linear,
    heads: usize,
}

impl SelfAttention {
    fn weights_and_values(&self, x: &Tensor, bias: &Tensor) -> Result<(Tensor, Tensor)> {
        let (b, n, w) = x.dims3()?;
        let dh = w / self.heads;
        let qkv = self
            .qkv
            .forward(x)?
            .reshape((b, n, 3, self.heads, dh))?
            .permute((2, 0, 3, 1, 4))?;
        let q = qkv.get(0)?.contiguous()?;
        let k = qkv.get(1)?.contiguous()?;
        let v = qkv.get(2)?.contiguous()?;
        let scale = 1.0 / (dh as f64).sqrt();
        let logits = (q.matmul(&k.t()?.contiguous()?)? * scale)?.broadcast_add(bias)?;
        let weights = candle_nn::ops::softmax(&logits, D::Minus1)?;
        Ok((weights, v))
    }

    fn forward(&self, x: &Tensor, bias: &Tensor) -> Result<Tensor> {
        let (b, n, w) = x.dims3()?;
        let (weights, v) = self.weights_and_values(x, bias)?;
        let out = weights.matmul(&v)?.transpose(1, 2)?.reshape((b, n, w))?;
        self.proj.forward(&out)
    }
}

/// Pre-norm transformer block: masked self-attention then an MLP, each residual.
pub struct TransformerBlock {
    norm1: LayerNorm,
    attn: SelfAttention,
    norm2: LayerNorm,
    mlp: Mlp,
}

impl TransformerBlock {
    pub fn new(store: &mut ParamStore, name: &str, width: usize, heads: usize, mlp_ratio: usize) -> Result<Self> {
        Ok(Self {
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), width)?,
            attn: SelfAttention {
                qkv: Linear::new(store, &format!("{name}.attn.qkv"), width, 3 * width)?,
                proj: Linear::new(store, &format!("{name}.attn.proj"), width, width)?,
                heads,
            },
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), width)?,
            mlp: Mlp::new(store, &format!("{name}.mlp"), width, width * mlp_ratio)?,
        })
    }

    /// `x`: `B × N × width`; `bias`: additive logits bias broadcastable to `B × H × N × N`.
    pub fn forward(&self, x: &Tensor, bias: &Tensor) -> Result<Tensor> {
        let x = (x + self.attn.forward(&self.norm1.forward(x)?, bias)?)?;
        Ok((&x + self.mlp.forward(&self.norm2.forward(&x)?)?)?)
    }

    /// Post-softmax attention weights, `B × H × N × N`.
    pub fn attention_weights(&self, x: &Tensor, bias: &Tensor) -> Result<Tensor> {
        Ok(self.attn.weights_and_values(&self.norm1.forward(x)?, bias)?.0)
    }
}

/// Additive bias tensor `1 × 1 × N × N` for `mask`.
pub fn mask_bias(mask: &AttentionMask, dtype: DType) -> Result<Tensor> {
    let n = mask.len();
    Ok(Tensor::from_vec(mask.to_bias(MASK_BIAS), (1, 1, n, n), &Device::Cpu)?.to_dtype(dtype)?)
}

/// Learned positional tables for the three segments, restarting at 0 per segment.
struct SegmentPositions {
    text: Tensor,
    cond: Tensor,
    gen: Tensor,
    segment: Tensor,
}

impl SegmentPositions {
    fn new(store: &mut ParamStore, name: &str, cfg: &BackboneConfig) -> Result<Self> {
        let std = 0.02;
        Ok(Self {
            text: store.normal(&format!("{name}.text"), &[cfg.max_text_len.max(1), cfg.width], std)?,
            cond: store.normal(&format!("{name}.cond"), &[cfg.max_cond_len.max(1), cfg.width], std)?,
            gen: store.normal(&format!("{name}.gen"), &[cfg.max_gen_len, cfg.width], std)?,
            segment: store.normal(&format!("{name}.segment"), &[3, cfg.width], std)?,
        })
    }

    /// `N × width` additive embedding for a full layout.
    fn for_layout(&self, layout: &SegmentLayout) -> Result<Tensor> {
        let mut parts = Vec::new();
        for (seg, table) in [
            (Segment::Text, &self.text),
            (Segment::ImageCond, &self.cond),
            (Segment::Generated, &self.gen),
        ] {
            let len = layout.len_of(seg);
            if len > 0 {
                let seg_row = self.segment.narrow(0, seg.index(), 1)?;
                parts.push(table.narrow(0, 0, len)?.broadcast_add(&seg_row)?);
            }
        }
        Ok(Tensor::cat(&parts, 0)?)
    }
}

fn index_tensor(idx: &[u32]) -> Result<Tensor> {
    Ok(Tensor::from_slice(idx, idx.len(), &Device::Cpu)?)
}

/// Picks rows of a `R × W` matrix.
fn select_rows(source: &Tensor, idx: &[u32]) -> Result<Tensor> {
    Ok(source.index_select(&index_tensor(idx)?, 0)?)
}

pub struct Backbone {
    cfg: BackboneConfig,
    dtype: DType,
    /// `(vocab + 1) × width`; the last row is the null-text embedding.
    text_table: Tensor,
    cond_proj: Linear,
    null_cond: Tensor,
    gen_proj: Linear,
    enc_mask_token: Tensor,
    enc_pos: SegmentPositions,
    encoder: Vec<TransformerBlock>,
    enc_norm: LayerNorm,
    dec_embed: Linear,
    dec_mask_token: Tensor,
    dec_pos: SegmentPositions,
    decoder: Vec<TransformerBlock>,
    dec_norm: LayerNorm,
}

impl Backbone {
    pub fn new(cfg: &BackboneConfig, store: &mut ParamStore) -> Result<Self> {
        cfg.validate()?;
        let w = cfg.width;
        let text_table = store.normal("backbone.text_embed", &[cfg.text_vocab_size + 1, w], 0.02)?;
        let cond_proj = Linear::new(store, "backbone.cond_proj", cfg.cond_token_dim, w)?;
        let null_cond = store.normal("backbone.null_cond", &[1, w], 0.02)?;
        let gen_proj = Linear::new(store, "backbone.gen_proj", cfg.token_dim, w)?;
        let enc_mask_token = store.normal("backbone.enc_mask_token", &[1, w], 0.02)?;
        let enc_pos = SegmentPositions::new(store, "backbone.enc_pos", cfg)?;
        let encoder = (0..cfg.depth_enc)
            .map(|i| TransformerBlock::new(store, &format!("backbone.enc.{i}"), w, cfg.heads, cfg.mlp_ratio))
            .collect::<Result<Vec<_>>>()?;
        let enc_norm = LayerNorm::new(store, "backbone.enc_norm", w)?;
        let dec_embed = Linear::new(store, "backbone.dec_embed", w, w)?;
        let dec_mask_token = store.normal("backbone.dec_mask_token", &[1, w], 0.02)?;
        let dec_pos = SegmentPositions::new(store, "backbone.dec_pos", cfg)?;
        let decoder = (0..cfg.depth_dec)
            .map(|i| TransformerBlock::new(store, &format!("backbone.dec.{i}"), w, cfg.heads, cfg.mlp_ratio))
            .collect::<Result<Vec<_>>>()?;
        let dec_norm = LayerNorm::new(store, "backbone.dec_norm", w)?;
        Ok(Self {
            cfg: cfg.clone(),
            dtype: store.dtype(),
            text_table,
            cond_proj,
            null_cond,
            gen_proj,
            enc_mask_token,
            enc_pos,
            encoder,
            enc_norm,
            dec_embed,
            dec_mask_token,
            dec_pos,
            decoder,
            dec_norm,
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.cfg
    }

    pub fn encoder_blocks(&self) -> &[TransformerBlock] {
        &self.encoder
    }

    pub fn decoder_blocks(&self) -> &[TransformerBlock] {
        &self.decoder
    }

    fn check_batch(&self, batch: &SequenceBatch) -> Result<()> {
        let l = &batch.layout;
        let c = &self.cfg;
        if l.text_len() > c.max_text_len || l.imgcond_len() > c.max_cond_len || l.gen_len() > c.max_gen_len {
            return Err(Error::Shape(format!(
                "layout {l} exceeds configured maxima {},{},{}",
                c.max_text_len, c.max_cond_len, c.max_gen_len
            )));
        }
        if let Some(&id) = batch.text_ids.iter().find(|&&id| id as usize >= c.text_vocab_size) {
            return Err(Error::InvalidArgument(format!(
                "text id {id} outside vocabulary of size {}",
                c.text_vocab_size
            )));
        }
        let (_, _, td) = batch.gen_tokens.dims3()?;
        if td != c.token_dim {
            return Err(Error::Shape(format!("token dim {td} != configured {}", c.token_dim)));
        }
        if l.imgcond_len() > 0 {
            let (_, _, cd) = batch.cond_tokens.dims3()?;
            if cd != c.cond_token_dim {
                return Err(Error::Shape(format!(
                    "condition token dim {cd} != configured {}",
                    c.cond_token_dim
                )));
            }
        }
        Ok(())
    }

    /// Token, segment and position embeddings for the whole sequence
    /// (`B × N × width`). Hidden generated positions carry the mask embedding.
    pub fn embed(&self, batch: &SequenceBatch) -> Result<Tensor> {
        self.check_batch(batch)?;
        let b = batch.batch_size();
        let layout = &batch.layout;
        let (t, c, g) = (layout.text_len(), layout.imgcond_len(), layout.gen_len());
        let w = self.cfg.width;
        let mut parts = Vec::with_capacity(3);

        if t > 0 {
            let null_row = self.cfg.text_vocab_size as u32;
            let idx: Vec<u32> = (0..b)
                .flat_map(|i| {
                    let row = &batch.text_ids[i * t..(i + 1) * t];
                    let null = batch.null_text[i];
                    row.iter().map(move |&id| if null { null_row } else { id })
                })
                .collect();
            parts.push(select_rows(&self.text_table, &idx)?.reshape((b, t, w))?);
        }
        if c > 0 {
            let cond = self.cond_proj.forward(&batch.cond_tokens.to_dtype(self.dtype)?)?;
            let source = Tensor::cat(&[cond.reshape((b * c, w))?, self.null_cond.clone()], 0)?;
            let idx: Vec<u32> = (0..b)
                .flat_map(|i| {
                    let null = batch.null_cond[i];
                    (0..c).map(move |j| if null { (b * c) as u32 } else { (i * c + j) as u32 })
                })
                .collect();
            parts.push(select_rows(&source, &idx)?.reshape((b, c, w))?);
        }
        let gen = self.gen_proj.forward(&batch.gen_tokens.to_dtype(self.dtype)?)?;
        let source = Tensor::cat(&[gen.reshape((b * g, w))?, self.enc_mask_token.clone()], 0)?;
        let idx: Vec<u32> = (0..b * g)
            .map(|i| if batch.visible[i] { i as u32 } else { (b * g) as u32 })
            .collect();
        parts.push(select_rows(&source, &idx)?.reshape((b, g, w))?);

        let tokens = Tensor::cat(&parts, 1)?;
        Ok(tokens.broadcast_add(&self.enc_pos.for_layout(layout)?)?)
    }

    pub fn forward(&self, batch: &SequenceBatch) -> Result<Tensor> {
        Ok(self.forward_full(batch)?.z)
    }

    /// Full forward pass, also returning per-position decoder states.
    pub fn forward_full(&self, batch: &SequenceBatch) -> Result<BackboneOutput> {
        let b = batch.batch_size();
        let layout = batch.layout;
        let n = layout.total_len();
        let cond_len = layout.cond_len();
        let g = layout.gen_len();
        let w = self.cfg.width;
        let full_mask = build_attention_mask(&layout, &batch.policy);

        let embedded = self.embed(batch)?;

        // Encoder input: condition positions followed by visible generated
        // positions in order, padded to the longest row in the batch.
        let rows: Vec<Vec<usize>> = (0..b)
            .map(|i| {
                (0..cond_len)
                    .chain(
                        batch
                            .visible_row(i)
                            .iter()
                            .enumerate()
                            .filter(|(_, &v)| v)
                            .map(|(j, _)| cond_len + j),
                    )
                    .collect()
            })
            .collect();
        let enc_len = rows.iter().map(Vec::len).max().unwrap_or(0);

        let (encoded, encoder_cond) = if enc_len == 0 {
            (None, None)
        } else {
            let mut gather = Vec::with_capacity(b * enc_len);
            let mut bias = vec![MASK_BIAS; b * enc_len * enc_len];
            for (i, row) in rows.iter().enumerate() {
                for slot in 0..enc_len {
                    gather.push((i * n + row.get(slot).copied().unwrap_or(0)) as u32);
                }
                let base = i * enc_len * enc_len;
                for q in 0..enc_len {
                    for k in 0..enc_len {
                        let allowed = match (row.get(q), row.get(k)) {
                            (Some(&pq), Some(&pk)) => full_mask.get(pq, pk),
                            _ => q == k,
                        };
                        if allowed {
                            bias[base + q * enc_len + k] = 0.0;
                        }
                    }
                }
            }
            let bias = Tensor::from_vec(bias, (b, 1, enc_len, enc_len), &Device::Cpu)?.to_dtype(self.dtype)?;
            let mut x = select_rows(&embedded.reshape((b * n, w))?, &gather)?.reshape((b, enc_len, w))?;
            for block in &self.encoder {
                x = block.forward(&x, &bias)?;
            }
            let x = self.enc_norm.forward(&x)?;
            let cond = if cond_len > 0 { Some(x.narrow(1, 0, cond_len)?) } else { None };
            (Some(x), cond)
        };

        // Decoder input: encoder outputs scattered back, placeholders elsewhere.
        let dec_tokens = match &encoded {
            Some(x) => {
                let projected = self.dec_embed.forward(x)?.reshape((b * enc_len, w))?;
                let source = Tensor::cat(&[projected, self.dec_mask_token.clone()], 0)?;
                let mask_row = (b * enc_len) as u32;
                let mut idx = Vec::with_capacity(b * n);
                for (i, row) in rows.iter().enumerate() {
                    let mut slot_of = vec![None; n];
                    for (slot, &p) in row.iter().enumerate() {
                        slot_of[p] = Some(slot);
                    }
                    idx.extend(
                        slot_of
                            .iter()
                            .map(|s| s.map_or(mask_row, |s| (i * enc_len + s) as u32)),
                    );
                }
                select_rows(&source, &idx)?.reshape((b, n, w))?
            }
            None => self.dec_mask_token.reshape((1, 1, w))?.broadcast_as((b, n, w))?.contiguous()?,
        };
        let mut x = dec_tokens.broadcast_add(&self.dec_pos.for_layout(&layout)?)?;
        let bias = mask_bias(&full_mask, self.dtype)?;
        for block in &self.decoder {
            x = block.forward(&x, &bias)?;
        }
        let hidden = self.dec_norm.forward(&x)?;
        ensure_finite(&hidden, "backbone activations")?;
        let z = hidden.narrow(1, cond_len, g)?;
        Ok(BackboneOutput {
            z,
            hidden,
            encoder_cond,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gaussian_tensor;
    use crate::seqmask::{ablation_policy, intra_mask, IntraMode};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_cfg() -> BackboneConfig {
        BackboneConfig {
            width: 16,
            depth_enc: 2,
            depth_dec: 2,
            heads: 2,
            token_dim: 6,
            cond_token_dim: 3,
            text_vocab_size: 5,
            max_text_len: 3,
            max_cond_len: 4,
            max_gen_len: 5,
            mlp_ratio: 2,
        }
    }

    fn batch(
        t: usize,
        c: usize,
        g: usize,
        visible: Vec<bool>,
        policy: AttentionPolicy,
        seed: u64,
    ) -> SequenceBatch {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let b = visible.len() / g;
        let ids = (0..b * t).map(|i| (i % 5) as u32).collect();
        let cond = gaussian_tensor(&mut rng, &[b, c, 3], DType::F64).unwrap();
        let gen = gaussian_tensor(&mut rng, &[b, g, 6], DType::F64).unwrap();
        SequenceBatch::new(ids, cond, gen, visible, policy).unwrap()
    }

    fn model(seed: u64) -> Backbone {
        let mut store = ParamStore::new(DType::F64, seed);
        Backbone::new(&tiny_cfg(), &mut store).unwrap()
    }

    fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
        (a - b).unwrap().abs().unwrap().flatten_all().unwrap().max(0).unwrap().to_scalar::<f64>().unwrap()
    }

    #[test]
    fn shapes() {
        let m = model(0);
        let bt = batch(2, 3, 4, vec![true, false, true, false, false, false, true, true], AttentionPolicy::PAPER_DEFAULT, 1);
        assert_eq!(m.embed(&bt).unwrap().dims(), &[2, 9, 16]);
        let out = m.forward_full(&bt).unwrap();
        assert_eq!(out.z.dims(), &[2, 4, 16]);
        assert_eq!(out.hidden.dims(), &[2, 9, 16]);

        let no_text = batch(0, 2, 3, vec![false; 3], AttentionPolicy::PAPER_DEFAULT, 2);
        assert_eq!(m.embed(&no_text).unwrap().dims(), &[1, 5, 16]);
        assert_eq!(m.forward(&no_text).unwrap().dims(), &[1, 3, 16]);

        let gen_only = batch(0, 0, 3, vec![false; 3], AttentionPolicy::PAPER_DEFAULT, 3);
        assert_eq!(m.forward(&gen_only).unwrap().dims(), &[1, 3, 16]);
    }

    #[test]
    fn hidden_token_value_is_invisible() {
        let m = model(0);
        let vis = vec![true, false, true];
        let a = batch(2, 2, 3, vis.clone(), AttentionPolicy::PAPER_DEFAULT, 5);
        let mut b = a.clone();
        let bumped = (b.gen_tokens.narrow(1, 1, 1).unwrap() + 3.0).unwrap();
        b.gen_tokens = Tensor::cat(&[a.gen_tokens.narrow(1, 0, 1).unwrap(), bumped, a.gen_tokens.narrow(1, 2, 1).unwrap()], 1).unwrap();
        let ea = m.embed(&a).unwrap();
        let eb = m.embed(&b).unwrap();
        assert_eq!(max_abs_diff(&ea, &eb), 0.0);
        assert_eq!(max_abs_diff(&m.forward(&a).unwrap(), &m.forward(&b).unwrap()), 0.0);
    }

    #[test]
    fn out_of_vocab_id_rejected() {
        let m = model(0);
        let mut bt = batch(2, 1, 2, vec![true, true], AttentionPolicy::PAPER_DEFAULT, 0);
        bt.text_ids[0] = 9;
        assert!(m.embed(&bt).is_err());
    }

    #[test]
    fn layout_beyond_maxima_rejected() {
        let m = model(0);
        let bt = batch(2, 1, 6, vec![true; 6], AttentionPolicy::PAPER_DEFAULT, 0);
        assert!(matches!(m.forward(&bt), Err(Error::Shape(_))));
    }

    fn perturbation_effect(policy: AttentionPolicy) -> f64 {
        let m = model(3);
        let a = batch(2, 2, 3, vec![true, true, true], policy, 9);
        let mut b = a.clone();
        b.gen_tokens = (&a.gen_tokens + 0.5).unwrap();
        let ha = m.forward_full(&a).unwrap().hidden.narrow(1, 0, 4).unwrap();
        let hb = m.forward_full(&b).unwrap().hidden.narrow(1, 0, 4).unwrap();
        max_abs_diff(&ha, &hb)
    }

    #[test]
    fn conditions_ignore_generated_under_default_policy() {
        assert_eq!(perturbation_effect(AttentionPolicy::PAPER_DEFAULT), 0.0);
        assert!(perturbation_effect(ablation_policy(8).unwrap()) > 1e-6);
    }

    #[test]
    fn attention_rows_are_distributions() {
        let mut store = ParamStore::new(DType::F64, 4);
        let block = TransformerBlock::new(&mut store, "b", 8, 2, 2).unwrap();
        let x = gaussian_tensor(&mut ChaCha8Rng::seed_from_u64(1), &[2, 5, 8], DType::F64).unwrap();
        let layout = SegmentLayout::new(2, 1, 2).unwrap();
        let mask = build_attention_mask(&layout, &AttentionPolicy::PAPER_DEFAULT);
        let weights = block.attention_weights(&x, &mask_bias(&mask, DType::F64).unwrap()).unwrap();
        let w = weights.flatten_to(2).unwrap().to_vec2::<f64>().unwrap();
        for (r, row) in w.iter().enumerate() {
            let q = r % 5;
            let sum: f64 = row.iter().sum();
            assert!((sum - 1.0).abs() < 1e-6);
            for (k, &v) in row.iter().enumerate() {
                assert!(v >= 0.0);
                if !mask.get(q, k) {
                    assert_eq!(v, 0.0);
                }
            }
            if q == 0 {
                assert_eq!(row[0], 1.0);
            }
        }

        let single = gaussian_tensor(&mut ChaCha8Rng::seed_from_u64(2), &[1, 1, 8], DType::F64).unwrap();
        let bias = mask_bias(&intra_mask(1, IntraMode::Bidirectional), DType::F64).unwrap();
        let w = block.attention_weights(&single, &bias).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        assert!(w.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn deterministic_forward() {
        let bt = batch(1, 2, 3, vec![true, false, true], AttentionPolicy::PAPER_DEFAULT, 7);
        let a = model(11).forward(&bt).unwrap();
        let b = model(11).forward(&bt).unwrap();
        assert_eq!(max_abs_diff(&a, &b), 0.0);
    }

    #[test]
    fn ragged_visibility_matches_per_sample_forward() {
        let m = model(5);
        let bt = batch(2, 2, 4, vec![true, false, true, true, false, false, true, false], AttentionPolicy::PAPER_DEFAULT, 3);
        let z = m.forward(&bt).unwrap();
        for i in 0..2 {
            let single = SequenceBatch::new(
                bt.text_ids[i * 2..(i + 1) * 2].to_vec(),
                bt.cond_tokens.narrow(0, i, 1).unwrap(),
                bt.gen_tokens.narrow(0, i, 1).unwrap(),
                bt.visible[i * 4..(i + 1) * 4].to_vec(),
                bt.policy,
            )
            .unwrap();
            let zi = m.forward(&single).unwrap();
            assert!(max_abs_diff(&zi, &z.narrow(0, i, 1).unwrap()) < 1e-12);
        }
    }
}
